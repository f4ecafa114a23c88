#include <cstdlib>
#include <iostream>

#include "cli.hpp"

int main(int argc, char** argv) {
  const char* env = std::getenv("FAMP_OUT_DIR");
  return famp::cli::run({argv + 1, argv + argc}, std::cout, std::cerr, env ? env : "");
}
