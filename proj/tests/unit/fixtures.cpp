#include "fixtures.hpp"

namespace kpop::testing {

const data::OracleClassifier& shared_oracle() {
  static const data::OracleClassifier o = data::OracleClassifier::train(data::OracleConfig{});
  return o;
}

}  // namespace kpop::testing
