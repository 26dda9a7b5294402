#include <iostream>

#include "midilm/cli.h"

int main(int argc, char** argv) {
  return midilm::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
