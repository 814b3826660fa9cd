#include "mimetic/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <numbers>
#include <utility>

namespace mimetic::ad {

namespace {

std::atomic<std::uint64_t> next_tape_id{1};

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

double norm_cdf(double x) { return 0.5 * std::erfc(-x * kInvSqrt2); }
double norm_pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }

// C[m x q] = A[m x k] * B[k x q], row-major, C pre-zeroed by caller.
void mm_accumulate(double* c, const double* a, const double* b, int m, int k,
                   int q) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<std::size_t>(i) * k;
    double* crow = c + static_cast<std::size_t>(i) * q;
    for (int l = 0; l < k; ++l) {
      const double av = arow[l];
      if (av == 0.0) continue;
      const double* brow = b + static_cast<std::size_t>(l) * q;
      for (int j = 0; j < q; ++j) {
        crow[j] += av * brow[j];
      }
    }
  }
}

// gA[m x k] += G[m x q] * B^T, i.e. gA[i,l] += dot(G[i,:], B[l,:]).
void mm_grad_a(double* ga, const double* g, const double* b, int m, int k,
               int q) {
  for (int i = 0; i < m; ++i) {
    const double* grow = g + static_cast<std::size_t>(i) * q;
    double* garow = ga + static_cast<std::size_t>(i) * k;
    for (int l = 0; l < k; ++l) {
      const double* brow = b + static_cast<std::size_t>(l) * q;
      double s = 0.0;
      for (int j = 0; j < q; ++j) {
        s += grow[j] * brow[j];
      }
      garow[l] += s;
    }
  }
}

// gB[k x q] += A^T * G, i.e. gB[l,j] += sum_i A[i,l] * G[i,j].
void mm_grad_b(double* gb, const double* a, const double* g, int m, int k,
               int q) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<std::size_t>(i) * k;
    const double* grow = g + static_cast<std::size_t>(i) * q;
    for (int l = 0; l < k; ++l) {
      const double av = arow[l];
      if (av == 0.0) continue;
      double* gbrow = gb + static_cast<std::size_t>(l) * q;
      for (int j = 0; j < q; ++j) {
        gbrow[j] += av * grow[j];
      }
    }
  }
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

int normalize_axis(int axis, int rank) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw ShapeError("axis " + std::to_string(axis) +
                     " out of range for rank " + std::to_string(rank));
  }
  return a;
}

std::vector<std::size_t> row_major_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
    strides[i] = strides[i + 1] * static_cast<std::size_t>(shape[i + 1]);
  }
  return strides;
}

// out[idx with axes a0,a1 swapped] = in[idx]
void transpose_copy(const double* in, double* out, const Shape& in_shape,
                    int a0, int a1) {
  const int rank = static_cast<int>(in_shape.size());
  Shape out_shape = in_shape;
  std::swap(out_shape[a0], out_shape[a1]);
  const auto in_strides = row_major_strides(in_shape);
  const auto out_strides = row_major_strides(out_shape);
  const std::size_t n = shape_numel(in_shape);
  std::vector<int> idx(rank, 0);
  for (std::size_t lin = 0; lin < n; ++lin) {
    std::size_t off = 0;
    for (int d = 0; d < rank; ++d) {
      int od = d;
      if (d == a0) od = a1;
      else if (d == a1) od = a0;
      off += static_cast<std::size_t>(idx[d]) * out_strides[od];
    }
    out[off] = in[lin];
    for (int d = rank - 1; d >= 0; --d) {
      if (++idx[d] < in_shape[d]) break;
      idx[d] = 0;
    }
  }
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::wrap(std::shared_ptr<Impl> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  for (int d : shape) {
    if (d <= 0) throw ShapeError("non-positive dimension in " + shape_str(shape));
  }
  auto impl = std::make_shared<Impl>();
  impl->data.assign(shape_numel(shape), 0.0);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return wrap(std::move(impl));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  for (int d : shape) {
    if (d <= 0) throw ShapeError("non-positive dimension in " + shape_str(shape));
  }
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return wrap(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return impl_->shape; }

int Tensor::dim(int axis) const {
  return impl_->shape[static_cast<std::size_t>(normalize_axis(axis, rank()))];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

std::span<const double> Tensor::data() const { return impl_->data; }

std::span<double> Tensor::mutable_data() { return impl_->data; }

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  return has_grad() ? std::span<const double>(impl_->grad)
                    : std::span<const double>();
}

std::span<double> Tensor::grad_buffer() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

double Tensor::item() const {
  if (numel() != 1) {
    throw UsageError("item() on tensor of shape " + shape_str(shape()));
  }
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  if (static_cast<int>(idx.size()) != rank()) {
    throw ShapeError("index rank mismatch for shape " + shape_str(shape()));
  }
  std::size_t off = 0;
  int d = 0;
  for (int i : idx) {
    if (i < 0 || i >= impl_->shape[d]) {
      throw ShapeError("index out of bounds for shape " + shape_str(shape()));
    }
    off = off * static_cast<std::size_t>(impl_->shape[d]) +
          static_cast<std::size_t>(i);
    ++d;
  }
  return impl_->data[off];
}

Tensor Tensor::clone(bool requires_grad) const {
  return from_data(impl_->shape, impl_->data, requires_grad);
}

// ---------------------------------------------------------------------------
// Tape

Tape::Tape(bool grad_enabled)
    : id_(next_tape_id.fetch_add(1)), grad_enabled_(grad_enabled) {}

Tensor Tape::make_output(Shape shape, std::initializer_list<Tensor> inputs) {
  bool needs = false;
  for (const Tensor& t : inputs) {
    // Leaves carry tape_id 0 and may feed any tape; intermediates are local
    // to the tape that produced them.
    if (t.impl_->tape_id != 0 && t.impl_->tape_id != id_) {
      throw UsageError("tensor produced by another tape used as an input");
    }
    if (grad_enabled_ && t.requires_grad()) needs = true;
  }
  Tensor out = Tensor::zeros(std::move(shape), needs);
  if (needs) out.impl_->tape_id = id_;
  return out;
}

void Tape::record(std::function<void()> fn) {
  records_.push_back(std::move(fn));
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw UsageError("backward requires a scalar loss");
  }
  if (!grad_enabled_ || loss.impl_->tape_id != id_) {
    throw UsageError("loss was not produced on this tape");
  }
  if (consumed_) {
    throw UsageError("tape already consumed by a previous backward");
  }
  consumed_ = true;
  loss.impl_->grad.assign(1, 1.0);
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    (*it)();
  }
  records_.clear();
}

// ---------------------------------------------------------------------------
// Ops

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool plain = sa.size() == 2 && sb.size() == 2;
  const bool batched = sa.size() == sb.size() && sa.size() > 2 &&
                       std::equal(sa.begin(), sa.end() - 2, sb.begin());
  if (!plain && !batched) {
    throw ShapeError("matmul shapes incompatible: " + shape_str(sa) + " vs " +
                     shape_str(sb));
  }
  const int m = sa[sa.size() - 2];
  const int k = sa[sa.size() - 1];
  const int kb = sb[sb.size() - 2];
  const int q = sb[sb.size() - 1];
  if (k != kb) {
    throw ShapeError("matmul inner dimensions disagree: " + shape_str(sa) +
                     " vs " + shape_str(sb));
  }
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < sa.size(); ++i)
    batch *= static_cast<std::size_t>(sa[i]);

  Shape out_shape(sa.begin(), sa.end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(q);
  Tensor out = make_output(std::move(out_shape), {a, b});

  const double* ad = a.data().data();
  const double* bd = b.data().data();
  double* od = out.mutable_data().data();
  const std::size_t a_step = static_cast<std::size_t>(m) * k;
  const std::size_t b_step = static_cast<std::size_t>(k) * q;
  const std::size_t o_step = static_cast<std::size_t>(m) * q;
  for (std::size_t s = 0; s < batch; ++s) {
    mm_accumulate(od + s * o_step, ad + s * a_step, bd + s * b_step, m, k, q);
  }

  if (out.requires_grad()) {
    record([a, b, out, m, k, q, batch, a_step, b_step, o_step]() mutable {
      const double* g = out.grad().data();
      if (a.requires_grad()) {
        double* ga = a.grad_buffer().data();
        const double* bd2 = b.data().data();
        for (std::size_t s = 0; s < batch; ++s) {
          mm_grad_a(ga + s * a_step, g + s * o_step, bd2 + s * b_step, m, k, q);
        }
      }
      if (b.requires_grad()) {
        double* gb = b.grad_buffer().data();
        const double* ad2 = a.data().data();
        for (std::size_t s = 0; s < batch; ++s) {
          mm_grad_b(gb + s * b_step, ad2 + s * a_step, g + s * o_step, m, k, q);
        }
      }
    });
  }
  return out;
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  if (!is_suffix(b.shape(), a.shape())) {
    throw ShapeError("add broadcast requires " + shape_str(b.shape()) +
                     " to be a suffix of " + shape_str(a.shape()));
  }
  Tensor out = make_output(a.shape(), {a, b});
  const std::size_t inner = b.numel();
  const std::size_t total = a.numel();
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  double* od = out.mutable_data().data();
  for (std::size_t i = 0; i < total; ++i) {
    od[i] = ad[i] + bd[i % inner];
  }
  if (out.requires_grad()) {
    record([a, b, out, inner, total]() mutable {
      const double* g = out.grad().data();
      if (a.requires_grad()) {
        double* ga = a.grad_buffer().data();
        for (std::size_t i = 0; i < total; ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        double* gb = b.grad_buffer().data();
        for (std::size_t i = 0; i < total; ++i) gb[i % inner] += g[i];
      }
    });
  }
  return out;
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  if (!is_suffix(b.shape(), a.shape())) {
    throw ShapeError("mul broadcast requires " + shape_str(b.shape()) +
                     " to be a suffix of " + shape_str(a.shape()));
  }
  Tensor out = make_output(a.shape(), {a, b});
  const std::size_t inner = b.numel();
  const std::size_t total = a.numel();
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  double* od = out.mutable_data().data();
  for (std::size_t i = 0; i < total; ++i) {
    od[i] = ad[i] * bd[i % inner];
  }
  if (out.requires_grad()) {
    record([a, b, out, inner, total]() mutable {
      const double* g = out.grad().data();
      const double* ad2 = a.data().data();
      const double* bd2 = b.data().data();
      if (a.requires_grad()) {
        double* ga = a.grad_buffer().data();
        for (std::size_t i = 0; i < total; ++i) ga[i] += g[i] * bd2[i % inner];
      }
      if (b.requires_grad()) {
        double* gb = b.grad_buffer().data();
        for (std::size_t i = 0; i < total; ++i) gb[i % inner] += g[i] * ad2[i];
      }
    });
  }
  return out;
}

Tensor Tape::scale(const Tensor& a, double c) {
  Tensor out = make_output(a.shape(), {a});
  const double* ad = a.data().data();
  double* od = out.mutable_data().data();
  const std::size_t total = a.numel();
  for (std::size_t i = 0; i < total; ++i) od[i] = ad[i] * c;
  if (out.requires_grad()) {
    record([a, out, c, total]() mutable {
      const double* g = out.grad().data();
      double* ga = a.grad_buffer().data();
      for (std::size_t i = 0; i < total; ++i) ga[i] += g[i] * c;
    });
  }
  return out;
}

Tensor Tape::gelu(const Tensor& x) {
  Tensor out = make_output(x.shape(), {x});
  const double* xd = x.data().data();
  double* od = out.mutable_data().data();
  const std::size_t total = x.numel();
  for (std::size_t i = 0; i < total; ++i) {
    od[i] = xd[i] * norm_cdf(xd[i]);
  }
  if (out.requires_grad()) {
    record([x, out, total]() mutable {
      const double* g = out.grad().data();
      const double* xd2 = x.data().data();
      double* gx = x.grad_buffer().data();
      for (std::size_t i = 0; i < total; ++i) {
        const double v = xd2[i];
        gx[i] += g[i] * (norm_cdf(v) + v * norm_pdf(v));
      }
    });
  }
  return out;
}

Tensor Tape::layernorm(const Tensor& x, const Tensor& gamma,
                       const Tensor& beta, double eps) {
  if (eps <= 0.0) throw UsageError("layernorm eps must be positive");
  if (x.rank() < 1) throw ShapeError("layernorm input must have rank >= 1");
  const int d = x.shape().back();
  if (gamma.rank() != 1 || gamma.dim(0) != d || beta.rank() != 1 ||
      beta.dim(0) != d) {
    throw ShapeError("layernorm affine shapes " + shape_str(gamma.shape()) +
                     ", " + shape_str(beta.shape()) +
                     " do not match last dim of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / static_cast<std::size_t>(d);
  Tensor out = make_output(x.shape(), {x, gamma, beta});

  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  const double* xd = x.data().data();
  const double* gd = gamma.data().data();
  const double* bd = beta.data().data();
  double* od = out.mutable_data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd + r * d;
    double mean = 0.0;
    for (int i = 0; i < d; ++i) mean += row[i];
    mean /= d;
    double var = 0.0;
    for (int i = 0; i < d; ++i) {
      const double c = row[i] - mean;
      var += c * c;
    }
    var /= d;
    const double istd = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = istd;
    double* hrow = xhat->data() + r * d;
    double* orow = od + r * d;
    for (int i = 0; i < d; ++i) {
      hrow[i] = (row[i] - mean) * istd;
      orow[i] = gd[i] * hrow[i] + bd[i];
    }
  }

  if (out.requires_grad()) {
    record([x, gamma, beta, out, xhat, inv_std, d, rows]() mutable {
      const double* g = out.grad().data();
      const double* gd2 = gamma.data().data();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* grow = g + r * d;
        const double* hrow = xhat->data() + r * d;
        if (x.requires_grad()) {
          double m1 = 0.0, m2 = 0.0;
          for (int i = 0; i < d; ++i) {
            const double gy = grow[i] * gd2[i];
            m1 += gy;
            m2 += gy * hrow[i];
          }
          m1 /= d;
          m2 /= d;
          double* gx = x.grad_buffer().data() + r * d;
          const double istd = (*inv_std)[r];
          for (int i = 0; i < d; ++i) {
            const double gy = grow[i] * gd2[i];
            gx[i] += istd * (gy - m1 - hrow[i] * m2);
          }
        }
        if (gamma.requires_grad()) {
          double* gg = gamma.grad_buffer().data();
          for (int i = 0; i < d; ++i) gg[i] += grow[i] * hrow[i];
        }
        if (beta.requires_grad()) {
          double* gb = beta.grad_buffer().data();
          for (int i = 0; i < d; ++i) gb[i] += grow[i];
        }
      }
    });
  }
  return out;
}

Tensor Tape::softmax(const Tensor& x) {
  if (x.rank() < 1) throw ShapeError("softmax input must have rank >= 1");
  const int d = x.shape().back();
  const std::size_t rows = x.numel() / static_cast<std::size_t>(d);
  Tensor out = make_output(x.shape(), {x});
  const double* xd = x.data().data();
  double* od = out.mutable_data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd + r * d;
    double* orow = od + r * d;
    double mx = row[0];
    for (int i = 1; i < d; ++i) mx = std::max(mx, row[i]);
    double z = 0.0;
    for (int i = 0; i < d; ++i) {
      orow[i] = std::exp(row[i] - mx);
      z += orow[i];
    }
    const double iz = 1.0 / z;
    for (int i = 0; i < d; ++i) orow[i] *= iz;
  }
  if (out.requires_grad()) {
    record([x, out, d, rows]() mutable {
      const double* g = out.grad().data();
      const double* yd = out.data().data();
      double* gx = x.grad_buffer().data();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* grow = g + r * d;
        const double* yrow = yd + r * d;
        double dot = 0.0;
        for (int i = 0; i < d; ++i) dot += grow[i] * yrow[i];
        double* gxrow = gx + r * d;
        for (int i = 0; i < d; ++i) {
          gxrow[i] += yrow[i] * (grow[i] - dot);
        }
      }
    });
  }
  return out;
}

Tensor Tape::depthwise_conv2d(const Tensor& x, const Tensor& kernels) {
  const bool batched = x.rank() == 4;
  if (!batched && x.rank() != 3) {
    throw ShapeError("depthwise_conv2d expects [C,H,W] or [B,C,H,W], got " +
                     shape_str(x.shape()));
  }
  if (kernels.rank() != 3 || kernels.dim(1) != kernels.dim(2)) {
    throw ShapeError("depthwise kernels must be [C,f,f], got " +
                     shape_str(kernels.shape()));
  }
  const int f = kernels.dim(1);
  if (f % 2 == 0) {
    throw ConfigError("depthwise filter size must be odd, got " +
                      std::to_string(f));
  }
  const int B = batched ? x.dim(0) : 1;
  const int C = batched ? x.dim(1) : x.dim(0);
  const int H = batched ? x.dim(2) : x.dim(1);
  const int W = batched ? x.dim(3) : x.dim(2);
  if (kernels.dim(0) != C) {
    throw ShapeError("kernel channels " + shape_str(kernels.shape()) +
                     " do not match input " + shape_str(x.shape()));
  }
  const int r = f / 2;
  Tensor out = make_output(x.shape(), {x, kernels});
  const double* xd = x.data().data();
  const double* kd = kernels.data().data();
  double* od = out.mutable_data().data();
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      const double* xp = xd + (static_cast<std::size_t>(b) * C + c) * plane;
      const double* kp = kd + static_cast<std::size_t>(c) * f * f;
      double* op = od + (static_cast<std::size_t>(b) * C + c) * plane;
      for (int i = 0; i < H; ++i) {
        for (int j = 0; j < W; ++j) {
          double s = 0.0;
          for (int u = 0; u < f; ++u) {
            const int ii = i + u - r;
            if (ii < 0 || ii >= H) continue;
            for (int v = 0; v < f; ++v) {
              const int jj = j + v - r;
              if (jj < 0 || jj >= W) continue;
              s += xp[static_cast<std::size_t>(ii) * W + jj] * kp[u * f + v];
            }
          }
          op[static_cast<std::size_t>(i) * W + j] = s;
        }
      }
    }
  }
  if (out.requires_grad()) {
    record([x, kernels, out, B, C, H, W, f, r, plane]() mutable {
      const double* g = out.grad().data();
      const double* xd2 = x.data().data();
      const double* kd2 = kernels.data().data();
      double* gx = x.requires_grad() ? x.grad_buffer().data() : nullptr;
      double* gk =
          kernels.requires_grad() ? kernels.grad_buffer().data() : nullptr;
      for (int b = 0; b < B; ++b) {
        for (int c = 0; c < C; ++c) {
          const std::size_t base = (static_cast<std::size_t>(b) * C + c) * plane;
          const double* gp = g + base;
          const double* xp = xd2 + base;
          const double* kp = kd2 + static_cast<std::size_t>(c) * f * f;
          for (int i = 0; i < H; ++i) {
            for (int j = 0; j < W; ++j) {
              const double gv = gp[static_cast<std::size_t>(i) * W + j];
              if (gv == 0.0) continue;
              for (int u = 0; u < f; ++u) {
                const int ii = i + u - r;
                if (ii < 0 || ii >= H) continue;
                for (int v = 0; v < f; ++v) {
                  const int jj = j + v - r;
                  if (jj < 0 || jj >= W) continue;
                  const std::size_t xoff = static_cast<std::size_t>(ii) * W + jj;
                  if (gx) gx[base + xoff] += gv * kp[u * f + v];
                  if (gk) {
                    gk[static_cast<std::size_t>(c) * f * f + u * f + v] +=
                        gv * xp[xoff];
                  }
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor Tape::cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2) {
    throw ShapeError("cross_entropy expects [batch x classes], got " +
                     shape_str(logits.shape()));
  }
  const int B = logits.dim(0);
  const int C = logits.dim(1);
  if (static_cast<int>(labels.size()) != B) {
    throw ShapeError("cross_entropy labels length " +
                     std::to_string(labels.size()) + " != batch " +
                     std::to_string(B));
  }
  for (int b = 0; b < B; ++b) {
    if (labels[b] < 0 || labels[b] >= C) {
      throw InputError("label " + std::to_string(labels[b]) +
                       " out of range [0, " + std::to_string(C) + ")");
    }
  }
  Tensor out = make_output({}, {logits});
  auto probs = std::make_shared<std::vector<double>>(logits.numel());
  const double* xd = logits.data().data();
  double loss = 0.0;
  for (int b = 0; b < B; ++b) {
    const double* row = xd + static_cast<std::size_t>(b) * C;
    double* prow = probs->data() + static_cast<std::size_t>(b) * C;
    double mx = row[0];
    for (int i = 1; i < C; ++i) mx = std::max(mx, row[i]);
    double z = 0.0;
    for (int i = 0; i < C; ++i) {
      prow[i] = std::exp(row[i] - mx);
      z += prow[i];
    }
    const double iz = 1.0 / z;
    for (int i = 0; i < C; ++i) prow[i] *= iz;
    loss += mx + std::log(z) - row[labels[b]];
  }
  out.mutable_data()[0] = loss / B;

  if (out.requires_grad()) {
    std::vector<int> lab(labels.begin(), labels.end());
    record([logits, out, probs, lab = std::move(lab), B, C]() mutable {
      const double gscale = out.grad()[0] / B;
      double* gx = logits.grad_buffer().data();
      const double* p = probs->data();
      for (int b = 0; b < B; ++b) {
        double* grow = gx + static_cast<std::size_t>(b) * C;
        const double* prow = p + static_cast<std::size_t>(b) * C;
        for (int i = 0; i < C; ++i) grow[i] += gscale * prow[i];
        grow[lab[b]] -= gscale;
      }
    });
  }
  return out;
}

Tensor Tape::reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape " + shape_str(x.shape()) + " -> " +
                     shape_str(shape) + " changes element count");
  }
  Tensor out = make_output(std::move(shape), {x});
  std::copy(x.data().begin(), x.data().end(), out.mutable_data().begin());
  if (out.requires_grad()) {
    const std::size_t total = x.numel();
    record([x, out, total]() mutable {
      const double* g = out.grad().data();
      double* gx = x.grad_buffer().data();
      for (std::size_t i = 0; i < total; ++i) gx[i] += g[i];
    });
  }
  return out;
}

Tensor Tape::transpose(const Tensor& x, int axis_a, int axis_b) {
  const int rank = x.rank();
  if (rank < 2) throw ShapeError("transpose needs rank >= 2");
  const int a0 = normalize_axis(axis_a, rank);
  const int a1 = normalize_axis(axis_b, rank);
  Shape out_shape = x.shape();
  std::swap(out_shape[a0], out_shape[a1]);
  Tensor out = make_output(std::move(out_shape), {x});
  transpose_copy(x.data().data(), out.mutable_data().data(), x.shape(), a0, a1);
  if (out.requires_grad()) {
    record([x, out, a0, a1]() mutable {
      // The adjoint of an axis swap is the same swap on the gradient.
      std::vector<double> tmp(x.numel());
      transpose_copy(out.grad().data(), tmp.data(), out.shape(), a0, a1);
      double* gx = x.grad_buffer().data();
      for (std::size_t i = 0; i < tmp.size(); ++i) gx[i] += tmp[i];
    });
  }
  return out;
}

Tensor Tape::mean_pool_tokens(const Tensor& x) {
  if (x.rank() != 3) {
    throw ShapeError("mean_pool_tokens expects [B,T,n], got " +
                     shape_str(x.shape()));
  }
  const int B = x.dim(0), T = x.dim(1), n = x.dim(2);
  Tensor out = make_output({B, n}, {x});
  const double* xd = x.data().data();
  double* od = out.mutable_data().data();
  const double inv = 1.0 / T;
  for (int b = 0; b < B; ++b) {
    double* orow = od + static_cast<std::size_t>(b) * n;
    for (int t = 0; t < T; ++t) {
      const double* row = xd + (static_cast<std::size_t>(b) * T + t) * n;
      for (int i = 0; i < n; ++i) orow[i] += row[i];
    }
    for (int i = 0; i < n; ++i) orow[i] *= inv;
  }
  if (out.requires_grad()) {
    record([x, out, B, T, n, inv]() mutable {
      const double* g = out.grad().data();
      double* gx = x.grad_buffer().data();
      for (int b = 0; b < B; ++b) {
        const double* grow = g + static_cast<std::size_t>(b) * n;
        for (int t = 0; t < T; ++t) {
          double* gxr = gx + (static_cast<std::size_t>(b) * T + t) * n;
          for (int i = 0; i < n; ++i) gxr[i] += grow[i] * inv;
        }
      }
    });
  }
  return out;
}

Tensor Tape::sum(const Tensor& x) {
  Tensor out = make_output({}, {x});
  double s = 0.0;
  for (double v : x.data()) s += v;
  out.mutable_data()[0] = s;
  if (out.requires_grad()) {
    const std::size_t total = x.numel();
    record([x, out, total]() mutable {
      const double g = out.grad()[0];
      double* gx = x.grad_buffer().data();
      for (std::size_t i = 0; i < total; ++i) gx[i] += g;
    });
  }
  return out;
}

Tensor Tape::patchify(const Tensor& images, int patch) {
  if (images.rank() != 4) {
    throw ShapeError("patchify expects [B,C,H,W], got " +
                     shape_str(images.shape()));
  }
  const int B = images.dim(0), C = images.dim(1), H = images.dim(2),
            W = images.dim(3);
  if (patch <= 0 || H % patch != 0 || W % patch != 0) {
    throw ConfigError("patch size " + std::to_string(patch) +
                      " does not divide image " + shape_str(images.shape()));
  }
  const int gh = H / patch, gw = W / patch;
  const int T = gh * gw;
  const int D = C * patch * patch;
  Tensor out = make_output({B, T, D}, {images});
  const double* xd = images.data().data();
  double* od = out.mutable_data().data();
  for (int b = 0; b < B; ++b) {
    for (int py = 0; py < gh; ++py) {
      for (int px = 0; px < gw; ++px) {
        const int t = py * gw + px;
        double* orow =
            od + (static_cast<std::size_t>(b) * T + t) * D;
        for (int c = 0; c < C; ++c) {
          for (int dy = 0; dy < patch; ++dy) {
            const double* src =
                xd + ((static_cast<std::size_t>(b) * C + c) * H +
                      (py * patch + dy)) *
                         W +
                px * patch;
            double* dst = orow + (c * patch + dy) * patch;
            for (int dx = 0; dx < patch; ++dx) dst[dx] = src[dx];
          }
        }
      }
    }
  }
  if (out.requires_grad()) {
    record([images, out, B, C, H, W, patch, gh, gw, T, D]() mutable {
      const double* g = out.grad().data();
      double* gx = images.grad_buffer().data();
      for (int b = 0; b < B; ++b) {
        for (int py = 0; py < gh; ++py) {
          for (int px = 0; px < gw; ++px) {
            const int t = py * gw + px;
            const double* grow = g + (static_cast<std::size_t>(b) * T + t) * D;
            for (int c = 0; c < C; ++c) {
              for (int dy = 0; dy < patch; ++dy) {
                double* dst = gx + ((static_cast<std::size_t>(b) * C + c) * H +
                                    (py * patch + dy)) *
                                       W +
                              px * patch;
                const double* src = grow + (c * patch + dy) * patch;
                for (int dx = 0; dx < patch; ++dx) dst[dx] += src[dx];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

}  // namespace mimetic::ad
