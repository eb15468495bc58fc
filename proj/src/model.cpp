#include "hrmlm/model.hpp"

namespace hrmlm {

int64_t LanguageModel::trainable_param_count() {
  int64_t n = 0;
  for (const NamedParam& p : params())
    if (p.tensor.requires_grad()) n += p.tensor.numel();
  return n;
}

int64_t LanguageModel::stored_param_count() {
  int64_t n = 0;
  for (const NamedParam& p : params()) n += p.tensor.numel();
  return n;
}

}  // namespace hrmlm
