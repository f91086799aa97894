#include "fairdisco/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <Eigen/Dense>

namespace fairdisco::nn {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<MatRM>;
using ConstMap = Eigen::Map<const MatRM>;

int conv_out_extent(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// im2col for a contiguous run of samples [first, first+count) into
// [C*k*k, count*out_h*out_w]; samples are laid side by side column-wise so one
// GEMM covers the whole chunk.
void im2col_chunk(const Tensor& x, int first, int count, int k, int stride, int pad,
                  MatRM& cols) {
  const int c_in = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int oh = conv_out_extent(h, k, stride, pad);
  const int ow = conv_out_extent(w, k, stride, pad);
  const int ohw = oh * ow;
  cols.setZero(c_in * k * k, static_cast<Eigen::Index>(count) * ohw);
  for (int s = 0; s < count; ++s) {
    const int sample = first + s;
    for (int c = 0; c < c_in; ++c)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const int row = (c * k + ky) * k + kx;
          for (int oy = 0; oy < oh; ++oy) {
            const int sy = oy * stride + ky - pad;
            if (sy < 0 || sy >= h) continue;
            for (int ox = 0; ox < ow; ++ox) {
              const int sx = ox * stride + kx - pad;
              if (sx < 0 || sx >= w) continue;
              cols(row, static_cast<Eigen::Index>(s) * ohw + oy * ow + ox) =
                  x.at(sample, c, sy, sx);
            }
          }
        }
  }
}

// reverse: accumulate chunk columns back into dx
void col2im_chunk(const MatRM& cols, int first, int count, int k, int stride, int pad,
                  Tensor& dx) {
  const int c_in = dx.dim(1), h = dx.dim(2), w = dx.dim(3);
  const int oh = conv_out_extent(h, k, stride, pad);
  const int ow = conv_out_extent(w, k, stride, pad);
  const int ohw = oh * ow;
  for (int s = 0; s < count; ++s) {
    const int sample = first + s;
    for (int c = 0; c < c_in; ++c)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const int row = (c * k + ky) * k + kx;
          for (int oy = 0; oy < oh; ++oy) {
            const int sy = oy * stride + ky - pad;
            if (sy < 0 || sy >= h) continue;
            for (int ox = 0; ox < ow; ++ox) {
              const int sx = ox * stride + kx - pad;
              if (sx < 0 || sx >= w) continue;
              dx.at(sample, c, sy, sx) +=
                  cols(row, static_cast<Eigen::Index>(s) * ohw + oy * ow + ox);
            }
          }
        }
  }
}

// chunk size keeping the cols buffer near 8 MB
int conv_chunk(int rows, int ohw, int batch) {
  const std::int64_t budget = (8 << 20) / sizeof(double);
  const std::int64_t per_sample = static_cast<std::int64_t>(rows) * ohw;
  const int chunk = static_cast<int>(std::max<std::int64_t>(1, budget / std::max<std::int64_t>(1, per_sample)));
  return std::min(chunk, batch);
}

}  // namespace

void kaiming_init(Tensor& weight, int fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / fan_in);
  for (double& v : weight.data) v = rng.normal() * stddev;
}

// ---- Linear ----------------------------------------------------------------

Linear::Linear(int in_features, int out_features, bool bias, Rng& rng, const std::string& name)
    : has_bias(bias), in_features_(in_features), out_features_(out_features) {
  weight.name = name + ".weight";
  weight.value = Tensor::zeros({out_features, in_features});
  weight.grad = Tensor::zeros({out_features, in_features});
  kaiming_init(weight.value, in_features, rng);
  if (has_bias) {
    this->bias.name = name + ".bias";
    this->bias.value = Tensor::zeros({out_features});
    this->bias.grad = Tensor::zeros({out_features});
  }
}

Tensor Linear::forward(const Tensor& x, bool) {
  if (x.ndim() != 2 || x.dim(1) != in_features_)
    throw std::invalid_argument("Linear: input shape mismatch");
  input_ = x;
  const int b = x.dim(0);
  Tensor y = Tensor::zeros({b, out_features_});
  ConstMap xm(x.data.data(), b, in_features_);
  ConstMap wm(weight.value.data.data(), out_features_, in_features_);
  Map ym(y.data.data(), b, out_features_);
  ym.noalias() = xm * wm.transpose();
  if (has_bias) {
    ConstMap bm(bias.value.data.data(), 1, out_features_);
    ym.rowwise() += bm.row(0);
  }
  return y;
}

Tensor Linear::backward(const Tensor& grad_out, bool accumulate_param_grads) {
  const int b = input_.dim(0);
  ConstMap dym(grad_out.data.data(), b, out_features_);
  ConstMap xm(input_.data.data(), b, in_features_);
  ConstMap wm(weight.value.data.data(), out_features_, in_features_);
  if (accumulate_param_grads) {
    Map dwm(weight.grad.data.data(), out_features_, in_features_);
    dwm.noalias() += dym.transpose() * xm;
    if (has_bias) {
      Map dbm(bias.grad.data.data(), 1, out_features_);
      dbm.row(0) += dym.colwise().sum();
    }
  }
  Tensor dx = Tensor::zeros(input_.shape);
  Map dxm(dx.data.data(), b, in_features_);
  dxm.noalias() = dym * wm;
  return dx;
}

void Linear::collect_parameters(std::vector<Parameter*>& out) {
  out.push_back(&weight);
  if (has_bias) out.push_back(&bias);
}

// ---- ReLU ------------------------------------------------------------------

Tensor ReLU::forward(const Tensor& x, bool) {
  input_ = x;
  Tensor y = x;
  for (double& v : y.data)
    if (v < 0.0) v = 0.0;
  return y;
}

Tensor ReLU::backward(const Tensor& grad_out, bool) {
  Tensor dx = grad_out;
  for (std::size_t i = 0; i < dx.data.size(); ++i)
    if (input_.data[i] <= 0.0) dx.data[i] = 0.0;
  return dx;
}

// ---- Conv2d ----------------------------------------------------------------

Conv2d::Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding, bool bias,
               Rng& rng, const std::string& name)
    : has_bias(bias),
      in_c_(in_channels),
      out_c_(out_channels),
      k_(kernel),
      stride_(stride),
      pad_(padding) {
  weight.name = name + ".weight";
  weight.value = Tensor::zeros({out_channels, in_channels, kernel, kernel});
  weight.grad = Tensor::zeros(weight.value.shape);
  kaiming_init(weight.value, in_channels * kernel * kernel, rng);
  if (has_bias) {
    this->bias.name = name + ".bias";
    this->bias.value = Tensor::zeros({out_channels});
    this->bias.grad = Tensor::zeros({out_channels});
  }
}

Tensor Conv2d::forward(const Tensor& x, bool) {
  if (x.ndim() != 4 || x.dim(1) != in_c_)
    throw std::invalid_argument("Conv2d: input shape mismatch");
  input_ = x;
  const int b = x.dim(0);
  const int oh = conv_out_extent(x.dim(2), k_, stride_, pad_);
  const int ow = conv_out_extent(x.dim(3), k_, stride_, pad_);
  if (oh <= 0 || ow <= 0) throw std::invalid_argument("Conv2d: input smaller than kernel");
  const int ohw = oh * ow;
  Tensor y = Tensor::zeros({b, out_c_, oh, ow});
  ConstMap wm(weight.value.data.data(), out_c_, in_c_ * k_ * k_);
  const int chunk = conv_chunk(in_c_ * k_ * k_, ohw, b);
  MatRM cols, out_mat;
  for (int first = 0; first < b; first += chunk) {
    const int count = std::min(chunk, b - first);
    im2col_chunk(x, first, count, k_, stride_, pad_, cols);
    out_mat.noalias() = wm * cols;  // [out_c, count*ohw]
    for (int s = 0; s < count; ++s) {
      Map ym(y.data.data() + (static_cast<std::size_t>(first) + s) * out_c_ * ohw, out_c_, ohw);
      ym = out_mat.middleCols(static_cast<Eigen::Index>(s) * ohw, ohw);
      if (has_bias)
        for (int oc = 0; oc < out_c_; ++oc) ym.row(oc).array() += bias.value[oc];
    }
  }
  return y;
}

Tensor Conv2d::backward(const Tensor& grad_out, bool accumulate_param_grads) {
  const int b = input_.dim(0);
  const int oh = grad_out.dim(2), ow = grad_out.dim(3);
  const int ohw = oh * ow;
  Tensor dx = Tensor::zeros(input_.shape);
  ConstMap wm(weight.value.data.data(), out_c_, in_c_ * k_ * k_);
  Map dwm(weight.grad.data.data(), out_c_, in_c_ * k_ * k_);
  const int chunk = conv_chunk(in_c_ * k_ * k_, ohw, b);
  MatRM cols, dcols, dy_mat;
  for (int first = 0; first < b; first += chunk) {
    const int count = std::min(chunk, b - first);
    dy_mat.resize(out_c_, static_cast<Eigen::Index>(count) * ohw);
    for (int s = 0; s < count; ++s) {
      ConstMap dym(grad_out.data.data() + (static_cast<std::size_t>(first) + s) * out_c_ * ohw,
                   out_c_, ohw);
      dy_mat.middleCols(static_cast<Eigen::Index>(s) * ohw, ohw) = dym;
    }
    if (accumulate_param_grads) {
      im2col_chunk(input_, first, count, k_, stride_, pad_, cols);
      dwm.noalias() += dy_mat * cols.transpose();
      if (has_bias)
        for (int oc = 0; oc < out_c_; ++oc) bias.grad[oc] += dy_mat.row(oc).sum();
    }
    dcols.noalias() = wm.transpose() * dy_mat;
    col2im_chunk(dcols, first, count, k_, stride_, pad_, dx);
  }
  return dx;
}

void Conv2d::collect_parameters(std::vector<Parameter*>& out) {
  out.push_back(&weight);
  if (has_bias) out.push_back(&bias);
}

// ---- MaxPool2d ---------------------------------------------------------------

MaxPool2d::MaxPool2d(int kernel, int stride, int padding)
    : k_(kernel), stride_(stride), pad_(padding) {}

Tensor MaxPool2d::forward(const Tensor& x, bool) {
  in_shape_ = x.shape;
  const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int oh = conv_out_extent(h, k_, stride_, pad_);
  const int ow = conv_out_extent(w, k_, stride_, pad_);
  Tensor y = Tensor::zeros({b, c, oh, ow});
  argmax_.assign(y.data.size(), -1);
  std::int64_t out_idx = 0;
  for (int n = 0; n < b; ++n)
    for (int ch = 0; ch < c; ++ch)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox, ++out_idx) {
          double best = -std::numeric_limits<double>::infinity();
          std::int64_t best_idx = -1;
          for (int ky = 0; ky < k_; ++ky) {
            const int sy = oy * stride_ + ky - pad_;
            if (sy < 0 || sy >= h) continue;
            for (int kx = 0; kx < k_; ++kx) {
              const int sx = ox * stride_ + kx - pad_;
              if (sx < 0 || sx >= w) continue;
              const double v = x.at(n, ch, sy, sx);
              if (v > best) {
                best = v;
                best_idx = ((static_cast<std::int64_t>(n) * c + ch) * h + sy) * w + sx;
              }
            }
          }
          y[out_idx] = best;
          argmax_[static_cast<std::size_t>(out_idx)] = best_idx;
        }
  return y;
}

Tensor MaxPool2d::backward(const Tensor& grad_out, bool) {
  Tensor dx = Tensor::zeros(in_shape_);
  for (std::size_t i = 0; i < grad_out.data.size(); ++i) {
    const std::int64_t src = argmax_[i];
    if (src >= 0) dx[src] += grad_out.data[i];
  }
  return dx;
}

// ---- GlobalAvgPool -----------------------------------------------------------

Tensor GlobalAvgPool::forward(const Tensor& x, bool) {
  in_shape_ = x.shape;
  const int b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor y = Tensor::zeros({b, c});
  for (int n = 0; n < b; ++n)
    for (int ch = 0; ch < c; ++ch) {
      const double* base =
          x.data.data() + (static_cast<std::size_t>(n) * c + ch) * static_cast<std::size_t>(hw);
      double sum = 0.0;
      for (int i = 0; i < hw; ++i) sum += base[i];
      y.at(n, ch) = sum / hw;
    }
  return y;
}

Tensor GlobalAvgPool::backward(const Tensor& grad_out, bool) {
  const int b = in_shape_[0], c = in_shape_[1], hw = in_shape_[2] * in_shape_[3];
  Tensor dx = Tensor::zeros(in_shape_);
  for (int n = 0; n < b; ++n)
    for (int ch = 0; ch < c; ++ch) {
      const double g = grad_out.at(n, ch) / hw;
      double* base =
          dx.data.data() + (static_cast<std::size_t>(n) * c + ch) * static_cast<std::size_t>(hw);
      for (int i = 0; i < hw; ++i) base[i] = g;
    }
  return dx;
}

// ---- BatchNorm2d -------------------------------------------------------------

BatchNorm2d::BatchNorm2d(int channels, const std::string& name, double eps, double momentum)
    : channels_(channels), eps_(eps), momentum_(momentum), name_(name) {
  gamma.name = name + ".gamma";
  gamma.value = Tensor::zeros({channels});
  gamma.value.fill(1.0);
  gamma.grad = Tensor::zeros({channels});
  beta.name = name + ".beta";
  beta.value = Tensor::zeros({channels});
  beta.grad = Tensor::zeros({channels});
  running_mean = Tensor::zeros({channels});
  running_var = Tensor::zeros({channels});
  running_var.fill(1.0);
}

Tensor BatchNorm2d::forward(const Tensor& x, bool training) {
  if (x.ndim() != 4 || x.dim(1) != channels_)
    throw std::invalid_argument("BatchNorm2d: input shape mismatch");
  in_shape_ = x.shape;
  trained_forward_ = training;
  const int b = x.dim(0), h = x.dim(2), w = x.dim(3);
  const std::int64_t n = static_cast<std::int64_t>(b) * h * w;

  Tensor y = Tensor::zeros(x.shape);
  normalized_ = Tensor::zeros(x.shape);
  inv_std_ = Tensor::zeros({channels_});
  for (int c = 0; c < channels_; ++c) {
    double mean, var;
    if (training) {
      double sum = 0.0, sq = 0.0;
      for (int nn = 0; nn < b; ++nn)
        for (int yy = 0; yy < h; ++yy)
          for (int xx = 0; xx < w; ++xx) {
            const double v = x.at(nn, c, yy, xx);
            sum += v;
            sq += v * v;
          }
      mean = sum / static_cast<double>(n);
      var = sq / static_cast<double>(n) - mean * mean;
      if (var < 0.0) var = 0.0;
      running_mean[c] = (1.0 - momentum_) * running_mean[c] + momentum_ * mean;
      running_var[c] = (1.0 - momentum_) * running_var[c] + momentum_ * var;
    } else {
      mean = running_mean[c];
      var = running_var[c];
    }
    const double inv = 1.0 / std::sqrt(var + eps_);
    inv_std_[c] = inv;
    const double g = gamma.value[c], bt = beta.value[c];
    for (int nn = 0; nn < b; ++nn)
      for (int yy = 0; yy < h; ++yy)
        for (int xx = 0; xx < w; ++xx) {
          const double xhat = (x.at(nn, c, yy, xx) - mean) * inv;
          normalized_.at(nn, c, yy, xx) = xhat;
          y.at(nn, c, yy, xx) = g * xhat + bt;
        }
  }
  return y;
}

Tensor BatchNorm2d::backward(const Tensor& grad_out, bool accumulate_param_grads) {
  const int b = in_shape_[0], h = in_shape_[2], w = in_shape_[3];
  const double n = static_cast<double>(static_cast<std::int64_t>(b) * h * w);
  Tensor dx = Tensor::zeros(in_shape_);
  for (int c = 0; c < channels_; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int nn = 0; nn < b; ++nn)
      for (int yy = 0; yy < h; ++yy)
        for (int xx = 0; xx < w; ++xx) {
          const double dy = grad_out.at(nn, c, yy, xx);
          sum_dy += dy;
          sum_dy_xhat += dy * normalized_.at(nn, c, yy, xx);
        }
    if (accumulate_param_grads) {
      gamma.grad[c] += sum_dy_xhat;
      beta.grad[c] += sum_dy;
    }
    const double g_inv = gamma.value[c] * inv_std_[c];
    if (trained_forward_) {
      const double mean_dy = sum_dy / n;
      const double mean_dy_xhat = sum_dy_xhat / n;
      for (int nn = 0; nn < b; ++nn)
        for (int yy = 0; yy < h; ++yy)
          for (int xx = 0; xx < w; ++xx)
            dx.at(nn, c, yy, xx) =
                g_inv * (grad_out.at(nn, c, yy, xx) - mean_dy -
                         normalized_.at(nn, c, yy, xx) * mean_dy_xhat);
    } else {
      for (int nn = 0; nn < b; ++nn)
        for (int yy = 0; yy < h; ++yy)
          for (int xx = 0; xx < w; ++xx)
            dx.at(nn, c, yy, xx) = g_inv * grad_out.at(nn, c, yy, xx);
    }
  }
  return dx;
}

void BatchNorm2d::collect_parameters(std::vector<Parameter*>& out) {
  out.push_back(&gamma);
  out.push_back(&beta);
}

void BatchNorm2d::collect_buffers(std::vector<std::pair<std::string, Tensor*>>& out) {
  out.emplace_back(name_ + ".running_mean", &running_mean);
  out.emplace_back(name_ + ".running_var", &running_var);
}

// ---- Sequential --------------------------------------------------------------

Tensor Sequential::forward(const Tensor& x, bool training) {
  Tensor h = x;
  for (auto& m : modules_) h = m->forward(h, training);
  return h;
}

Tensor Sequential::backward(const Tensor& grad_out, bool accumulate_param_grads) {
  Tensor g = grad_out;
  for (auto it = modules_.rbegin(); it != modules_.rend(); ++it)
    g = (*it)->backward(g, accumulate_param_grads);
  return g;
}

void Sequential::collect_parameters(std::vector<Parameter*>& out) {
  for (auto& m : modules_) m->collect_parameters(out);
}

void Sequential::collect_buffers(std::vector<std::pair<std::string, Tensor*>>& out) {
  for (auto& m : modules_) m->collect_buffers(out);
}

// ---- softmax -----------------------------------------------------------------

Tensor softmax_rows(const Tensor& logits) {
  if (logits.ndim() != 2) throw std::invalid_argument("softmax_rows: expected 2D input");
  Tensor p = Tensor::zeros(logits.shape);
  const int b = logits.dim(0), k = logits.dim(1);
  for (int i = 0; i < b; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < k; ++j) m = std::max(m, logits.at(i, j));
    double sum = 0.0;
    for (int j = 0; j < k; ++j) {
      const double e = std::exp(logits.at(i, j) - m);
      p.at(i, j) = e;
      sum += e;
    }
    for (int j = 0; j < k; ++j) p.at(i, j) /= sum;
  }
  return p;
}

Tensor softmax_backward(const Tensor& probs, const Tensor& grad_probs) {
  Tensor dlogits = Tensor::zeros(probs.shape);
  const int b = probs.dim(0), k = probs.dim(1);
  for (int i = 0; i < b; ++i) {
    double dot = 0.0;
    for (int j = 0; j < k; ++j) dot += probs.at(i, j) * grad_probs.at(i, j);
    for (int j = 0; j < k; ++j)
      dlogits.at(i, j) = probs.at(i, j) * (grad_probs.at(i, j) - dot);
  }
  return dlogits;
}

}  // namespace fairdisco::nn
