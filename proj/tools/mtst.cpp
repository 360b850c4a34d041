#include "mtst/cli.hpp"

int main(int argc, char** argv) { return mtst::cli::main(argc, argv); }
