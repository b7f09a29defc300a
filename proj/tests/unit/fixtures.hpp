#pragma once

#include "kpop/synthetic_data.hpp"

namespace kpop::testing {

// Trained once per process with the default config.
const data::OracleClassifier& shared_oracle();

}  // namespace kpop::testing
