#define ADL_ENABLE_HTTP
#include "adl/cli.hpp"

int main(int argc, char** argv) { return adl::cli_main(argc, argv); }
