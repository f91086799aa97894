#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "fairdisco/rng.hpp"
#include "fairdisco/tensor.hpp"

namespace fairdisco::nn {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  void zero_grad() { grad.fill(0.0); }
};

/// One forward/backward cycle at a time: forward caches what backward needs,
/// backward consumes it. `accumulate_param_grads=false` propagates input
/// gradients while leaving parameter gradients untouched (loss scoping).
class Module {
 public:
  virtual ~Module() = default;
  virtual Tensor forward(const Tensor& x, bool training) = 0;
  virtual Tensor backward(const Tensor& grad_out, bool accumulate_param_grads = true) = 0;
  virtual void collect_parameters(std::vector<Parameter*>& out) {}
  virtual void collect_buffers(std::vector<std::pair<std::string, Tensor*>>& out) {}
};

class Linear : public Module {
 public:
  Linear(int in_features, int out_features, bool bias, Rng& rng, const std::string& name);

  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out, bool accumulate_param_grads = true) override;
  void collect_parameters(std::vector<Parameter*>& out) override;

  Parameter weight;  // [out, in]
  Parameter bias;    // [out]
  bool has_bias;

 private:
  int in_features_, out_features_;
  Tensor input_;
};

class ReLU : public Module {
 public:
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out, bool accumulate_param_grads = true) override;

 private:
  Tensor input_;
};

class Conv2d : public Module {
 public:
  Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding, bool bias,
         Rng& rng, const std::string& name);

  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out, bool accumulate_param_grads = true) override;
  void collect_parameters(std::vector<Parameter*>& out) override;

  Parameter weight;  // [out_c, in_c, k, k]
  Parameter bias;    // [out_c]
  bool has_bias;

 private:
  int in_c_, out_c_, k_, stride_, pad_;
  Tensor input_;
};

class MaxPool2d : public Module {
 public:
  MaxPool2d(int kernel, int stride, int padding = 0);

  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out, bool accumulate_param_grads = true) override;

 private:
  int k_, stride_, pad_;
  std::vector<int> in_shape_;
  std::vector<std::int64_t> argmax_;  // flat input index per output element
};

class GlobalAvgPool : public Module {
 public:
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out, bool accumulate_param_grads = true) override;

 private:
  std::vector<int> in_shape_;
};

class BatchNorm2d : public Module {
 public:
  BatchNorm2d(int channels, const std::string& name, double eps = 1e-5, double momentum = 0.1);

  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out, bool accumulate_param_grads = true) override;
  void collect_parameters(std::vector<Parameter*>& out) override;
  void collect_buffers(std::vector<std::pair<std::string, Tensor*>>& out) override;

  Parameter gamma;  // scale
  Parameter beta;   // shift
  Tensor running_mean;
  Tensor running_var;

 private:
  int channels_;
  double eps_, momentum_;
  bool trained_forward_ = false;
  Tensor normalized_;  // cached x-hat
  Tensor inv_std_;     // per channel
  std::vector<int> in_shape_;
  std::string name_;
};

class Sequential : public Module {
 public:
  Sequential() = default;
  void add(std::unique_ptr<Module> module) { modules_.push_back(std::move(module)); }

  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out, bool accumulate_param_grads = true) override;
  void collect_parameters(std::vector<Parameter*>& out) override;
  void collect_buffers(std::vector<std::pair<std::string, Tensor*>>& out) override;

 private:
  std::vector<std::unique_ptr<Module>> modules_;
};

/// Row-wise stable softmax.
Tensor softmax_rows(const Tensor& logits);
/// dL/dlogits from cached probabilities and dL/dprobs.
Tensor softmax_backward(const Tensor& probs, const Tensor& grad_probs);

/// Kaiming-normal fill: stddev = sqrt(2 / fan_in).
void kaiming_init(Tensor& weight, int fan_in, Rng& rng);

}  // namespace fairdisco::nn
