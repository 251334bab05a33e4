#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "pls/common.hpp"
#include "pls/dataset.hpp"
#include "pls/gan.hpp"
#include "pls/model.hpp"

namespace pls {
namespace detail {

inline void write_doubles(std::ostream& out, const Vec& v) {
  out << v.size();
  for (const double x : v) out << ' ' << format_double(x);
  out << '\n';
}

inline Vec read_doubles(std::istream& in, const std::string& what) {
  std::size_t n = 0;
  if (!(in >> n)) throw ValidationError("checkpoint: bad count for " + what);
  Vec v(n);
  for (auto& x : v) {
    if (!(in >> x)) throw ValidationError("checkpoint: bad value in " + what);
  }
  return v;
}

inline void expect_token(std::istream& in, const std::string& token) {
  std::string got;
  if (!(in >> got) || got != token) {
    throw ValidationError("checkpoint: expected '" + token + "', got '" + got +
                          "'");
  }
}

inline void write_matrix(std::ostream& out, const Matrix& m) {
  out << m.rows << ' ' << m.cols;
  for (const double x : m.data) out << ' ' << format_double(x);
  out << '\n';
}

inline Matrix read_matrix(std::istream& in, const std::string& what) {
  std::size_t rows = 0, cols = 0;
  if (!(in >> rows >> cols)) {
    throw ValidationError("checkpoint: bad shape for " + what);
  }
  Matrix m(rows, cols);
  for (auto& x : m.data) {
    if (!(in >> x)) throw ValidationError("checkpoint: bad value in " + what);
  }
  return m;
}

inline std::string activation_name(Activation a) {
  return a == Activation::Tanh ? "tanh" : "relu";
}

inline Activation activation_from_name(const std::string& name) {
  if (name == "tanh") return Activation::Tanh;
  if (name == "relu") return Activation::Relu;
  throw ValidationError("checkpoint: unknown activation '" + name + "'");
}

inline void write_mlp(std::ostream& out, const Mlp& net) {
  out << "mlp " << activation_name(net.activation) << ' ' << net.layers.size()
      << '\n';
  for (const auto& layer : net.layers) {
    write_matrix(out, layer.weight);
    write_doubles(out, layer.bias);
  }
}

inline Mlp read_mlp(std::istream& in) {
  expect_token(in, "mlp");
  std::string act;
  std::size_t count = 0;
  if (!(in >> act >> count)) throw ValidationError("checkpoint: bad mlp header");
  Mlp net;
  net.activation = activation_from_name(act);
  net.layers.resize(count);
  for (auto& layer : net.layers) {
    layer.weight = read_matrix(in, "mlp weight");
    layer.bias = read_doubles(in, "mlp bias");
  }
  return net;
}

inline void write_model_body(std::ostream& out, const ModelParams& p) {
  write_mlp(out, p.embedding);
  out << "head ";
  write_matrix(out, p.head_weight);
  out << "bn " << format_double(p.bn.momentum) << ' '
      << format_double(p.bn.epsilon) << '\n';
  write_doubles(out, p.bn.scale);
  write_doubles(out, p.bn.shift);
  write_doubles(out, p.bn.running_mean);
  write_doubles(out, p.bn.running_var);
  out << "dropout " << format_double(p.dropout_rate) << '\n';
}

inline ModelParams read_model_body(std::istream& in) {
  ModelParams p;
  p.embedding = read_mlp(in);
  expect_token(in, "head");
  p.head_weight = read_matrix(in, "head weight");
  expect_token(in, "bn");
  if (!(in >> p.bn.momentum >> p.bn.epsilon)) {
    throw ValidationError("checkpoint: bad bn header");
  }
  p.bn.scale = read_doubles(in, "bn scale");
  p.bn.shift = read_doubles(in, "bn shift");
  p.bn.running_mean = read_doubles(in, "bn running mean");
  p.bn.running_var = read_doubles(in, "bn running var");
  expect_token(in, "dropout");
  if (!(in >> p.dropout_rate)) {
    throw ValidationError("checkpoint: bad dropout rate");
  }
  return p;
}

}  // namespace detail

inline constexpr const char* kModelFormatHeader = "pls-model 1";

inline void save_model(const ModelParams& params, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("save_model: cannot open " + path);
  out << kModelFormatHeader << '\n';
  detail::write_model_body(out, params);
  if (!out) throw IoError("save_model: write failed for " + path);
}

inline ModelParams load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_model: cannot open " + path);
  std::string word, version;
  if (!(in >> word >> version) || word != "pls-model" || version != "1") {
    throw ValidationError("load_model: " + path +
                          ": missing or unsupported format header");
  }
  return detail::read_model_body(in);
}

// ---------------------------------------------------------------------------
// Translator checkpoints

namespace detail {

inline void write_generator(std::ostream& out, const Generator& gen) {
  if (gen.kind == GeneratorKind::Affine) {
    out << "affine ";
    write_matrix(out, gen.affine.weight);
    write_doubles(out, gen.affine.bias);
  } else {
    out << "gen-mlp\n";
    write_mlp(out, gen.net);
  }
}

inline Generator read_generator(std::istream& in) {
  std::string kind;
  if (!(in >> kind)) throw ValidationError("checkpoint: missing generator");
  Generator gen;
  if (kind == "affine") {
    gen.kind = GeneratorKind::Affine;
    gen.affine.weight = read_matrix(in, "generator weight");
    gen.affine.bias = read_doubles(in, "generator bias");
  } else if (kind == "gen-mlp") {
    gen.kind = GeneratorKind::Mlp;
    gen.net = read_mlp(in);
  } else {
    throw ValidationError("checkpoint: unknown generator kind '" + kind + "'");
  }
  return gen;
}

}  // namespace detail

inline constexpr const char* kTranslatorFormatHeader = "pls-translators 1";

inline void save_translators(const CameraTranslator& translator,
                             const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("save_translators: cannot open " + path);
  out << kTranslatorFormatHeader << '\n';
  out << translator.camera_count << ' ' << translator.input_dim << ' '
      << detail::format_double(translator.lambda) << ' '
      << (translator.kind == GeneratorKind::Affine ? "affine" : "mlp") << ' '
      << translator.pairs.size() << '\n';
  for (const auto& pair : translator.pairs) {
    out << "pair " << pair.cam_lo << ' ' << pair.cam_hi << '\n';
    detail::write_generator(out, pair.forward_gen);
    detail::write_generator(out, pair.backward_gen);
    detail::write_mlp(out, pair.disc_hi);
    detail::write_mlp(out, pair.disc_lo);
  }
  if (!out) throw IoError("save_translators: write failed for " + path);
}

inline CameraTranslator load_translators(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_translators: cannot open " + path);
  std::string word, version;
  if (!(in >> word >> version) || word != "pls-translators" || version != "1") {
    throw ValidationError("load_translators: " + path +
                          ": missing or unsupported format header");
  }
  CameraTranslator t;
  std::string kind;
  std::size_t pair_count = 0;
  if (!(in >> t.camera_count >> t.input_dim >> t.lambda >> kind >>
        pair_count)) {
    throw ValidationError("load_translators: bad header fields");
  }
  t.kind = kind == "affine" ? GeneratorKind::Affine : GeneratorKind::Mlp;
  const std::size_t expected =
      static_cast<std::size_t>(t.camera_count) *
      static_cast<std::size_t>(t.camera_count - 1) / 2;
  if (pair_count != expected) {
    throw ValidationError("load_translators: expected " +
                          std::to_string(expected) + " pairs, file has " +
                          std::to_string(pair_count));
  }
  for (std::size_t i = 0; i < pair_count; ++i) {
    detail::expect_token(in, "pair");
    PairTranslator pair;
    if (!(in >> pair.cam_lo >> pair.cam_hi)) {
      throw ValidationError("load_translators: bad pair cameras");
    }
    pair.forward_gen = detail::read_generator(in);
    pair.backward_gen = detail::read_generator(in);
    pair.disc_hi = detail::read_mlp(in);
    pair.disc_lo = detail::read_mlp(in);
    t.pairs.push_back(std::move(pair));
  }
  return t;
}

}  // namespace pls
