#pragma once

// Minimal dense/conv building blocks with explicit backward passes.
// Activations are stored feature-major: one column per batch element.

#include <cmath>

#include <Eigen/Dense>

namespace vapors::nn {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

// Y = W X + b (b is a column vector broadcast over the batch).
template <typename S>
Mat<S> affine(const Mat<S>& w, const Mat<S>& b, const Mat<S>& x) {
  Mat<S> y = w * x;
  y.colwise() += b.col(0);
  return y;
}

// Accumulates dW, db and returns dX.
template <typename S>
Mat<S> affine_backward(const Mat<S>& w, const Mat<S>& x, const Mat<S>& dy, Mat<S>& dw, Mat<S>& db) {
  dw.noalias() += dy * x.transpose();
  db.col(0) += dy.rowwise().sum();
  return w.transpose() * dy;
}

template <typename S>
void affine_backward_params(const Mat<S>& x, const Mat<S>& dy, Mat<S>& dw, Mat<S>& db) {
  dw.noalias() += dy * x.transpose();
  db.col(0) += dy.rowwise().sum();
}

template <typename S>
Mat<S> elu(const Mat<S>& x) {
  return x.unaryExpr([](S v) { return v > S(0) ? v : std::expm1(v); });
}

// ELU'(x) = 1 for x > 0, exp(x) = y + 1 otherwise; expressed via the output y.
template <typename S>
Mat<S> elu_backward(const Mat<S>& y, const Mat<S>& dy) {
  return dy.binaryExpr(y, [](S g, S v) { return v > S(0) ? g : g * (v + S(1)); });
}

template <typename S>
Mat<S> sigmoid(const Mat<S>& x) {
  return x.unaryExpr([](S v) { return S(1) / (S(1) + std::exp(-v)); });
}

template <typename S>
Mat<S> vstack(const Mat<S>& a, const Mat<S>& b) {
  Mat<S> out(a.rows() + b.rows(), a.cols());
  out.topRows(a.rows()) = a;
  out.bottomRows(b.rows()) = b;
  return out;
}

// ---- layout permutations for non-overlapping (stride == kernel) convolutions --

// (C*npos) x B  ->  C x (npos*B)
template <typename S>
Mat<S> channels_to_cols(const Mat<S>& x, int channels, int npos) {
  const int batch = static_cast<int>(x.cols());
  Mat<S> out(channels, static_cast<Eigen::Index>(npos) * batch);
  for (int b = 0; b < batch; ++b)
    for (int c = 0; c < channels; ++c)
      for (int p = 0; p < npos; ++p) out(c, b * npos + p) = x(c * npos + p, b);
  return out;
}

// Inverse of channels_to_cols.
template <typename S>
Mat<S> cols_to_channels(const Mat<S>& m, int channels, int npos) {
  const int batch = static_cast<int>(m.cols()) / npos;
  Mat<S> out(static_cast<Eigen::Index>(channels) * npos, batch);
  for (int b = 0; b < batch; ++b)
    for (int c = 0; c < channels; ++c)
      for (int p = 0; p < npos; ++p) out(c * npos + p, b) = m(c, b * npos + p);
  return out;
}

// Image batch (C*H*W) x B  ->  patches (C*k*k) x (npos*B), npos = (H/k)*(W/k).
template <typename S>
Mat<S> im2col(const Mat<S>& x, int channels, int height, int width, int k) {
  const int ho = height / k, wo = width / k, npos = ho * wo;
  const int batch = static_cast<int>(x.cols());
  Mat<S> out(static_cast<Eigen::Index>(channels) * k * k, static_cast<Eigen::Index>(npos) * batch);
  for (int b = 0; b < batch; ++b)
    for (int c = 0; c < channels; ++c)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox)
          for (int dy = 0; dy < k; ++dy)
            for (int dx = 0; dx < k; ++dx)
              out((c * k + dy) * k + dx, b * npos + oy * wo + ox) =
                  x((c * height + oy * k + dy) * width + ox * k + dx, b);
  return out;
}

// Inverse of im2col (a pure permutation for stride == kernel).
template <typename S>
Mat<S> col2im(const Mat<S>& p, int channels, int height, int width, int k) {
  const int ho = height / k, wo = width / k, npos = ho * wo;
  const int batch = static_cast<int>(p.cols()) / npos;
  Mat<S> out(static_cast<Eigen::Index>(channels) * height * width, batch);
  for (int b = 0; b < batch; ++b)
    for (int c = 0; c < channels; ++c)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox)
          for (int dy = 0; dy < k; ++dy)
            for (int dx = 0; dx < k; ++dx)
              out((c * height + oy * k + dy) * width + ox * k + dx, b) =
                  p((c * k + dy) * k + dx, b * npos + oy * wo + ox);
  return out;
}

/// Strided convolution, kernel == stride. Weights: out_ch x (in_ch*k*k), bias per out channel.
template <typename S>
struct PatchConv {
  int in_ch, out_ch, height, width, k;

  int npos() const { return (height / k) * (width / k); }

  // Returns the pre-activation output ((out_ch*npos) x B); `patches` is kept for backward.
  Mat<S> forward(const Mat<S>& w, const Mat<S>& b, const Mat<S>& x, Mat<S>& patches) const {
    patches = im2col(x, in_ch, height, width, k);
    return cols_to_channels<S>(affine(w, b, patches), out_ch, npos());
  }

  Mat<S> backward(const Mat<S>& w, const Mat<S>& patches, const Mat<S>& dy, Mat<S>& dw, Mat<S>& db,
                  bool need_input_grad) const {
    const Mat<S> dym = channels_to_cols(dy, out_ch, npos());
    affine_backward_params<S>(patches, dym, dw, db);
    if (!need_input_grad) return {};
    return col2im<S>(w.transpose() * dym, in_ch, height, width, k);
  }
};

/// Transposed counterpart: each input position expands to a k x k patch.
/// Weights: (out_ch*k*k) x in_ch, bias per (out_ch, patch offset).
template <typename S>
struct PatchDeconv {
  int in_ch, out_ch, in_height, in_width, k;

  int npos() const { return in_height * in_width; }

  Mat<S> forward(const Mat<S>& w, const Mat<S>& b, const Mat<S>& x, Mat<S>& cols) const {
    cols = channels_to_cols(x, in_ch, npos());
    return col2im<S>(affine(w, b, cols), out_ch, in_height * k, in_width * k, k);
  }

  Mat<S> backward(const Mat<S>& w, const Mat<S>& cols, const Mat<S>& dy, Mat<S>& dw, Mat<S>& db) const {
    const Mat<S> dym = im2col(dy, out_ch, in_height * k, in_width * k, k);
    affine_backward_params<S>(cols, dym, dw, db);
    return cols_to_channels<S>(w.transpose() * dym, in_ch, npos());
  }
};

/// Gated recurrent cell: r, u gates; candidate n = tanh(Wx_n x + r * (Wh_n h + bh_n)).
template <typename S>
struct GruCache {
  Mat<S> x, h_prev, gh_n, r, u, n;
};

template <typename S>
Mat<S> gru_forward(const Mat<S>& wx, const Mat<S>& bx, const Mat<S>& wh, const Mat<S>& bh, const Mat<S>& x,
                   const Mat<S>& h_prev, GruCache<S>& c) {
  const Eigen::Index d = h_prev.rows();
  const Mat<S> gx = affine(wx, bx, x);
  const Mat<S> gh = affine(wh, bh, h_prev);
  c.x = x;
  c.h_prev = h_prev;
  c.r = sigmoid<S>(gx.topRows(d) + gh.topRows(d));
  c.u = sigmoid<S>(gx.middleRows(d, d) + gh.middleRows(d, d));
  c.gh_n = gh.bottomRows(d);
  c.n = (gx.bottomRows(d) + c.r.cwiseProduct(c.gh_n)).array().tanh().matrix();
  return (Mat<S>::Ones(d, x.cols()) - c.u).cwiseProduct(c.n) + c.u.cwiseProduct(h_prev);
}

// Returns dX; dh_prev is written to `dh_prev`.
template <typename S>
Mat<S> gru_backward(const Mat<S>& wx, const Mat<S>& wh, const GruCache<S>& c, const Mat<S>& dh, Mat<S>& dwx,
                    Mat<S>& dbx, Mat<S>& dwh, Mat<S>& dbh, Mat<S>& dh_prev) {
  const Eigen::Index d = c.h_prev.rows();
  const auto ones = Mat<S>::Ones(d, dh.cols());
  const Mat<S> dn = dh.cwiseProduct(ones - c.u);
  const Mat<S> du = dh.cwiseProduct(c.h_prev - c.n);
  const Mat<S> dan = dn.cwiseProduct(ones - c.n.cwiseProduct(c.n));
  const Mat<S> dr = dan.cwiseProduct(c.gh_n);
  const Mat<S> dar = dr.cwiseProduct(c.r.cwiseProduct(ones - c.r));
  const Mat<S> dau = du.cwiseProduct(c.u.cwiseProduct(ones - c.u));

  Mat<S> dgx(3 * d, dh.cols());
  dgx << dar, dau, dan;
  Mat<S> dgh(3 * d, dh.cols());
  dgh << dar, dau, dan.cwiseProduct(c.r);

  dh_prev = dh.cwiseProduct(c.u) + affine_backward(wh, c.h_prev, dgh, dwh, dbh);
  return affine_backward(wx, c.x, dgx, dwx, dbx);
}

}  // namespace vapors::nn
