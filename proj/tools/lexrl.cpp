#include "lexrl/cli.hpp"

int main(int argc, char** argv) { return lexrl::cli::dispatch(argc, argv); }
