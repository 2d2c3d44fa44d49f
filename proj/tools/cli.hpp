#pragma once

#include <string>
#include <vector>

namespace dsa {

/// Full command line (argv[0] first). 0 ok, 1 validation/usage, 2 numerical.
int dispatch(const std::vector<std::string>& argv);

}  // namespace dsa
