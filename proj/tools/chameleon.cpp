#include "chameleon/cli.hpp"

int main(int argc, char** argv) { return chameleon::cli::main(argc, argv); }
