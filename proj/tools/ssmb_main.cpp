// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "ssmb/cli.hpp"

int main(int argc, char** argv) {
  return ssmb::cli_dispatch(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
