#pragma once

#include <vector>

#include "dbp/diffusion.hpp"
#include "dbp/nets.hpp"
#include "dbp/purify.hpp"
#include "dbp/rng.hpp"

namespace testing {

// Small randomly initialised 64-bit models for pipeline-level tests.
struct ToyModels {
  static constexpr std::size_t kDim = 12;
  dbp::Schedule schedule = dbp::default_schedule(40);
  dbp::DenoiserNet denoiser;
  dbp::ClassifierNet classifier;

  explicit ToyModels(std::uint64_t seed = 1) {
    dbp::DenoiserSpec ds;
    ds.image_dim = kDim;
    ds.hidden = 16;
    ds.time_dim = 8;
    ds.T = 40;
    ds.dtype = dbp::Dtype::F64;
    denoiser = dbp::DenoiserNet(ds, seed);
    dbp::ClassifierSpec cs;
    cs.image_dim = kDim;
    cs.hidden = 10;
    cs.num_classes = 3;
    cs.dtype = dbp::Dtype::F64;
    classifier = dbp::ClassifierNet(cs, seed + 1);
  }
};

inline dbp::Tensor toy_images(std::size_t rows, std::uint64_t seed,
                              std::size_t dim = ToyModels::kDim) {
  dbp::Buffer v(rows * dim);
  dbp::rng::fill_uniform({seed, dbp::rng::Stream::DatasetPixels, 0}, v);
  for (double& x : v) x = 0.2 + 0.6 * x;
  return dbp::Tensor({rows, dim}, std::move(v));
}

inline std::vector<std::size_t> iota_ids(std::size_t n, std::size_t start = 0) {
  std::vector<std::size_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = start + i;
  return ids;
}

}  // namespace testing
