#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "trfeddis/data.hpp"
#include "trfeddis/model.hpp"

namespace trfeddis::metrics {

/// How the fused opinion of a two-head model is formed at evaluation.
enum class FusionMode {
  kEvidential,  // Dempster-Shafer combination of the two head opinions
  kLogitSum,    // one opinion from the summed raw outputs
};

struct EvalResult {
  double accuracy = 0.0;  // fused opinion
  double accuracy_global = 0.0;
  double accuracy_local = 0.0;  // equals accuracy_global for single-head models
  double mean_u = 0.0;          // fused uncertainty
  std::vector<double> uncertainty;
  std::vector<std::size_t> predicted;
};

/// Scores every sample of `ds` in eval mode (BN running statistics).
EvalResult evaluate(const model::Model& model, const data::Dataset& ds,
                    FusionMode fusion = FusionMode::kEvidential, std::size_t batch_size = 256);

/// Fused uncertainties only; convenience for OOD scoring.
std::vector<double> fused_uncertainty(const model::Model& model, const nd::Tensor& inputs,
                                      FusionMode fusion = FusionMode::kEvidential,
                                      std::size_t batch_size = 256);

/// Rank-based AUROC of `noisy` scoring above `clean`; ties count one half.
/// Throws std::invalid_argument on empty input.
double auroc(const std::vector<double>& clean, const std::vector<double>& noisy);

/// CSV: client,label,f0..f{D-1},g0..g{K-1},l0..l{K-1}. Single-head models
/// repeat the global outputs in the local columns so the schema is fixed.
void dump_embeddings(const model::Model& model, const data::Dataset& ds, std::size_t client,
                     const std::filesystem::path& path);

}  // namespace trfeddis::metrics
