#pragma once

#include <optional>
#include <string>
#include <vector>

#include "vqr/nets.hpp"
#include "vqr/tensor.hpp"

namespace vqr {

/// 10*log10(1/MSE) on unit-range images; +infinity for identical inputs.
double psnr(const Tensor& a, const Tensor& b);

/// Standard structural similarity on the luma plane: 0.299/0.587/0.114 gray
/// conversion, 11x11 Gaussian window (sigma 1.5), C1=0.01^2, C2=0.03^2,
/// averaged over valid (unpadded) windows.
double ssim(const Tensor& a, const Tensor& b);

/// Cosine similarity of the deepest frozen-extractor features; the stand-in
/// for a pretrained identity embedding at this scale.
double identity_proxy(const Tensor& a, const Tensor& b, const FeatureExtractor& phi);

struct EvalRow {
  std::string name;
  double psnr = 0.0;  // +inf encoded as infinity()
  double ssim = 0.0;
  double ids = 0.0;
  std::optional<double> code_acc;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  int infinite_psnr_count = 0;
  double mean_psnr = 0.0;  // over finite rows
  double mean_ssim = 0.0;
  double mean_ids = 0.0;
  std::optional<double> mean_code_acc;

  void finalize();
  std::string to_csv() const;
  std::string summary() const;
};

}  // namespace vqr
