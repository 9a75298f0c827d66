#include "parprobe/cli.hpp"

int main(int argc, char** argv) { return parprobe::cli::dispatch(argc, argv); }
