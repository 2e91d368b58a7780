#pragma once

#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <prototransfer.hpp>

namespace pt_test {

using namespace prototransfer;
using DTensor = BasicTensor<double>;
using Build = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

inline DTensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  DTensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = uniform(rng, lo, hi);
  return t;
}

inline Tensor random_float(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(uniform(rng, lo, hi));
  return t;
}

/// Worst relative error between backward() and central differences over every
/// entry of every input.
inline double op_gradcheck(const Build& f, const std::vector<DTensor>& inputs, double h = 1e-6,
                           double floor = 1e-6) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& x : inputs) vars.push_back(tape.variable(x));
  Var<double> loss = f(tape, vars);
  tape.backward(loss);
  double worst = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const DTensor analytic = tape.grad(vars[k].id);
    auto fn = [&](const DTensor& x) {
      Tape<double> t2;
      std::vector<Var<double>> v2;
      for (std::size_t j = 0; j < inputs.size(); ++j) v2.push_back(t2.constant(j == k ? x : inputs[j]));
      return f(t2, v2).value().item();
    };
    const DTensor numeric = finite_diff_gradient(fn, inputs[k], h);
    worst = std::max(worst, max_relative_error(analytic, numeric, floor));
  }
  return worst;
}

/// Scalar reduction with a non-trivial gradient: sum((x + 0.3)^2).
inline Var<double> reduce(Var<double> x) { return ops::sum(ops::square(ops::add_scalar(x, 0.3))); }

/// Mild augmentation for small synthetic runs: crop-resize (scale 0.7-1) and
/// pixel dropout.
inline AugmentationPipeline light_pipeline(std::size_t size) {
  AugmentationPipeline p{"light", 1, size, {}};
  p.transforms.push_back(presets::rrc({0.7, 1.0}, size));
  TransformSpec drop;
  drop.kind = TransformKind::PixelDropout;
  drop.p = 0.5;
  drop.drop_rate = 0.2;
  p.transforms.push_back(drop);
  return p;
}

/// Fresh directory under the system temp path, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("pt_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is), {});
}

}  // namespace pt_test
