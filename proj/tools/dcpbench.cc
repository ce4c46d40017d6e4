#include <iostream>

#include "dcp/cli.h"

int main(int argc, char** argv) {
  return dcp::run_cli(argc, argv, std::cout, std::cerr);
}
