#include "ffce/cli.hpp"

int main(int argc, char** argv) { return ffce::cli_run(argc, argv); }
