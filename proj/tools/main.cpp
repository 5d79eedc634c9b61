#include <iostream>
#include <string>
#include <vector>

#include "mcd/harness/cli.hpp"

int main(int argc, char** argv) {
  return mcd::harness::cli_dispatch(std::vector<std::string>(argv + 1, argv + argc), std::cout,
                                    std::cerr);
}
