#include <iostream>

#include "cdiffdet/cli.hpp"

int main(int argc, char** argv) {
  return cdiffdet::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
