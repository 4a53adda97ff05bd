#include "dfl/forecaster.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

namespace dfl {

using nlohmann::json;

std::vector<Index> MlpParams::layer_sizes() const {
  std::vector<Index> sizes;
  sizes.push_back(layers.front().W.cols());
  for (const auto& l : layers) sizes.push_back(l.W.rows());
  return sizes;
}

Index MlpParams::param_count() const {
  Index c = 0;
  for (const auto& l : layers) c += l.W.size() + l.b.size();
  return c;
}

std::uint64_t MlpParams::digest() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& l : layers) {
    h = fnv1a(l.W.data(), sizeof(Scalar) * static_cast<std::size_t>(l.W.size()), h);
    h = fnv1a(l.b.data(), sizeof(Scalar) * static_cast<std::size_t>(l.b.size()), h);
  }
  return h;
}

MlpParams make_mlp(const std::vector<Index>& sizes, std::uint64_t seed) {
  if (sizes.size() < 2) throw ConfigError("make_mlp: need at least input and output sizes");
  MlpParams mlp;
  auto rng = make_rng(seed, /*purpose=*/0x6d6c70 /* "mlp" */);
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    const Index in = sizes[i], out = sizes[i + 1];
    const Scalar bound = 1.0 / std::sqrt(static_cast<Scalar>(in));
    MlpLayer layer;
    layer.W = Mat(out, in);
    std::uniform_real_distribution<Scalar> dist(-bound, bound);
    for (Index r = 0; r < out; ++r)
      for (Index c = 0; c < in; ++c) layer.W(r, c) = dist(rng);
    layer.b = Vec::Zero(out);
    mlp.layers.push_back(std::move(layer));
  }
  return mlp;
}

Scalar MlpGrads::norm1() const {
  Scalar s = 0.0;
  for (const auto& l : layers) s += l.W.cwiseAbs().sum() + l.b.cwiseAbs().sum();
  return s;
}

void MlpGrads::scale(Scalar a) {
  for (auto& l : layers) {
    l.W *= a;
    l.b *= a;
  }
}

void MlpGrads::accumulate(const MlpGrads& other, Scalar weight) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i].W += weight * other.layers[i].W;
    layers[i].b += weight * other.layers[i].b;
  }
}

Vec MlpGrads::flatten() const {
  Index total = 0;
  for (const auto& l : layers) total += l.W.size() + l.b.size();
  Vec out(total);
  Index at = 0;
  for (const auto& l : layers) {
    out.segment(at, l.W.size()) = Eigen::Map<const Vec>(l.W.data(), l.W.size());
    at += l.W.size();
    out.segment(at, l.b.size()) = l.b;
    at += l.b.size();
  }
  return out;
}

MlpGrads zero_grads(const MlpParams& mlp) {
  MlpGrads g;
  for (const auto& l : mlp.layers)
    g.layers.push_back({Mat::Zero(l.W.rows(), l.W.cols()), Vec::Zero(l.b.size())});
  return g;
}

Vec mlp_forward(const MlpParams& mlp, const Vec& x, MlpTape* tape) {
  if (x.size() != mlp.input_size()) throw DataError("mlp_forward: input dimension mismatch");
  if (tape) {
    tape->input = x;
    tape->pre.clear();
    tape->post.clear();
  }
  Vec h = x;
  const std::size_t d = mlp.layers.size();
  for (std::size_t i = 0; i < d; ++i) {
    Vec pre = mlp.layers[i].W * h + mlp.layers[i].b;
    const bool relu = (i + 1 < d) || mlp.terminal_relu;
    Vec post = relu ? Vec(pre.cwiseMax(0.0)) : pre;
    if (tape) {
      tape->pre.push_back(pre);
      tape->post.push_back(post);
    }
    h = std::move(post);
  }
  return h;
}

MlpGrads mlp_backward(const MlpParams& mlp, const MlpTape& tape, const Vec& dL_dy, Vec* d_x) {
  const std::size_t d = mlp.layers.size();
  if (tape.pre.size() != d) throw DataError("mlp_backward: tape does not match network");
  MlpGrads g = zero_grads(mlp);
  Vec delta = dL_dy;
  for (std::size_t i = d; i-- > 0;) {
    const bool relu = (i + 1 < d) || mlp.terminal_relu;
    if (relu)
      delta = (tape.pre[i].array() > 0.0).select(delta, 0.0);
    const Vec& upstream = i == 0 ? tape.input : tape.post[i - 1];
    g.layers[i].W = delta * upstream.transpose();
    g.layers[i].b = delta;
    delta = mlp.layers[i].W.transpose() * delta;
  }
  if (d_x) *d_x = delta;
  return g;
}

Scalar OptimizerState::lr_at(long step_index) const {
  const long s = std::min(step_index, total_steps);
  const Scalar frac = total_steps > 0 ? static_cast<Scalar>(s) / static_cast<Scalar>(total_steps) : 1.0;
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * frac));
}

OptimizerState make_optimizer(const MlpParams& mlp, Scalar base_lr, long total_steps) {
  OptimizerState opt;
  opt.base_lr = base_lr;
  opt.total_steps = std::max<long>(total_steps, 1);
  for (const auto& l : mlp.layers) {
    opt.m.push_back({Mat::Zero(l.W.rows(), l.W.cols()), Vec::Zero(l.b.size())});
    opt.v.push_back({Mat::Zero(l.W.rows(), l.W.cols()), Vec::Zero(l.b.size())});
  }
  return opt;
}

void clip_and_step(OptimizerState& opt, MlpParams& mlp, const MlpGrads& grads) {
  Scalar n1 = 0.0;
  for (const auto& l : grads.layers) {
    if (!l.W.allFinite() || !l.b.allFinite())
      throw SolverError("clip_and_step: non-finite gradient");
    n1 += l.W.cwiseAbs().sum() + l.b.cwiseAbs().sum();
  }
  const Scalar scale = n1 > opt.clip_norm1 ? opt.clip_norm1 / n1 : 1.0;

  const Scalar lr = opt.lr_at(opt.step);
  opt.step += 1;
  const Scalar bc1 = 1.0 - std::pow(opt.beta1, static_cast<Scalar>(opt.step));
  const Scalar bc2 = 1.0 - std::pow(opt.beta2, static_cast<Scalar>(opt.step));
  for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
    auto adam = [&](Mat& p, Mat& m, Mat& v, const Mat& raw) {
      Mat gM = scale * raw;
      m = opt.beta1 * m + (1.0 - opt.beta1) * gM;
      v = opt.beta2 * v + (1.0 - opt.beta2) * gM.cwiseProduct(gM);
      Mat mh = m / bc1;
      Mat vh = v / bc2;
      p -= lr * mh.cwiseQuotient(vh.cwiseSqrt() + Mat::Constant(p.rows(), p.cols(), opt.eps));
    };
    adam(mlp.layers[i].W, opt.m[i].W, opt.v[i].W, grads.layers[i].W);
    Mat bp = mlp.layers[i].b, bm = opt.m[i].b, bv = opt.v[i].b, braw = grads.layers[i].b;
    adam(bp, bm, bv, braw);
    mlp.layers[i].b = bp;
    opt.m[i].b = bm;
    opt.v[i].b = bv;
  }
}

namespace {

json mat_to_json(const Mat& M) {
  std::vector<Scalar> flat(static_cast<std::size_t>(M.size()));
  for (Index i = 0; i < M.rows(); ++i)
    for (Index j = 0; j < M.cols(); ++j)
      flat[static_cast<std::size_t>(i * M.cols() + j)] = M(i, j);  // row-major
  return json(flat);
}

Mat mat_from_json(const json& j, Index rows, Index cols) {
  Mat M(rows, cols);
  if (static_cast<Index>(j.size()) != rows * cols)
    throw DataError("checkpoint: weight array size mismatch");
  for (Index i = 0; i < rows; ++i)
    for (Index jj = 0; jj < cols; ++jj)
      M(i, jj) = j.at(static_cast<std::size_t>(i * cols + jj)).get<Scalar>();
  return M;
}

}  // namespace

void save_checkpoint(const MlpParams& mlp, const OptimizerState* opt, const std::string& path) {
  json j;
  j["format_version"] = 1;
  j["terminal_relu"] = mlp.terminal_relu;
  std::vector<long> sizes;
  for (Index s : mlp.layer_sizes()) sizes.push_back(static_cast<long>(s));
  j["layer_sizes"] = sizes;
  j["layers"] = json::array();
  for (const auto& l : mlp.layers) {
    json lj;
    lj["w"] = mat_to_json(l.W);
    lj["b"] = std::vector<Scalar>(l.b.data(), l.b.data() + l.b.size());
    j["layers"].push_back(lj);
  }
  if (opt) {
    json oj;
    oj["step"] = opt->step;
    oj["base_lr"] = opt->base_lr;
    oj["total_steps"] = opt->total_steps;
    oj["m"] = json::array();
    oj["v"] = json::array();
    for (std::size_t i = 0; i < opt->m.size(); ++i) {
      oj["m"].push_back({{"w", mat_to_json(opt->m[i].W)},
                         {"b", std::vector<Scalar>(opt->m[i].b.data(),
                                                   opt->m[i].b.data() + opt->m[i].b.size())}});
      oj["v"].push_back({{"w", mat_to_json(opt->v[i].W)},
                         {"b", std::vector<Scalar>(opt->v[i].b.data(),
                                                   opt->v[i].b.data() + opt->v[i].b.size())}});
    }
    j["optimizer"] = oj;
  }
  std::ofstream out(path);
  if (!out) throw DataError("checkpoint: cannot write " + path);
  out << j.dump() << "\n";
}

MlpParams load_checkpoint(const std::string& path, OptimizerState* opt) {
  std::ifstream in(path);
  if (!in) throw DataError("checkpoint: cannot open " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError("checkpoint: parse error: " + std::string(e.what()));
  }
  if (!j.contains("format_version") || j["format_version"].get<int>() != 1)
    throw DataError("checkpoint: unsupported format version");
  MlpParams mlp;
  mlp.terminal_relu = j.value("terminal_relu", true);
  std::vector<long> sizes = j.at("layer_sizes").get<std::vector<long>>();
  const auto& layers = j.at("layers");
  if (layers.size() + 1 != sizes.size()) throw DataError("checkpoint: layer count mismatch");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    MlpLayer l;
    l.W = mat_from_json(layers[i].at("w"), sizes[i + 1], sizes[i]);
    auto bv = layers[i].at("b").get<std::vector<Scalar>>();
    l.b = Eigen::Map<const Vec>(bv.data(), static_cast<Index>(bv.size()));
    mlp.layers.push_back(std::move(l));
  }
  if (opt) {
    *opt = make_optimizer(mlp, 1e-3, 1);
    if (j.contains("optimizer")) {
      const auto& oj = j["optimizer"];
      opt->step = oj.at("step").get<long>();
      opt->base_lr = oj.at("base_lr").get<Scalar>();
      opt->total_steps = oj.at("total_steps").get<long>();
      for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
        opt->m[i].W = mat_from_json(oj.at("m")[i].at("w"), mlp.layers[i].W.rows(),
                                    mlp.layers[i].W.cols());
        auto mb = oj.at("m")[i].at("b").get<std::vector<Scalar>>();
        opt->m[i].b = Eigen::Map<const Vec>(mb.data(), static_cast<Index>(mb.size()));
        opt->v[i].W = mat_from_json(oj.at("v")[i].at("w"), mlp.layers[i].W.rows(),
                                    mlp.layers[i].W.cols());
        auto vb = oj.at("v")[i].at("b").get<std::vector<Scalar>>();
        opt->v[i].b = Eigen::Map<const Vec>(vb.data(), static_cast<Index>(vb.size()));
      }
    }
  }
  return mlp;
}

}  // namespace dfl
