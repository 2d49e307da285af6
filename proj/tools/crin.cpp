#include <iostream>

#include "crin/cli.hpp"

int main(int argc, char** argv) {
  return crin::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
