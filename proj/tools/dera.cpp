#include "dera/harness/cli.hpp"

int main(int argc, char** argv) {
  dera::tune_allocator();
  return dera::run_cli(argc, argv);
}
