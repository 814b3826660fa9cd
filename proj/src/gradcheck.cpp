#include "mimetic/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "mimetic/autodiff.hpp"
#include "mimetic/models.hpp"
#include "mimetic/rng.hpp"

namespace mimetic::gradcheck {

namespace {

bool g_inject_fault = false;

double rel_err(double analytic, double fd) {
  return std::abs(analytic - fd) /
         std::max({std::abs(analytic), std::abs(fd), 1e-3});
}

// Worst relative error between backward() gradients and central finite
// differences, over every coordinate of every tensor in `params`.
// `forward` must rebuild the loss from the current parameter values each
// call. `perturb` is added to each analytic gradient (fault-injection hook).
double check_params(std::vector<ad::Tensor> params,
                    const std::function<ad::Tensor(ad::Tape&)>& forward,
                    double step, double perturb = 0.0) {
  std::vector<std::vector<double>> analytic;
  {
    ad::Tape tape;
    ad::Tensor loss = forward(tape);
    tape.backward(loss);
    for (ad::Tensor& p : params) {
      auto g = p.grad();
      analytic.emplace_back(g.begin(), g.end());
      if (analytic.back().empty()) {
        analytic.back().assign(p.numel(), 0.0);  // unreached parameter
      }
      p.zero_grad();
    }
  }

  const auto eval = [&]() {
    ad::Tape tape(false);
    return forward(tape).item();
  };

  double worst = 0.0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto data = params[t].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + step;
      const double up = eval();
      data[i] = saved - step;
      const double down = eval();
      data[i] = saved;
      const double fd = (up - down) / (2.0 * step);
      worst = std::max(worst, rel_err(analytic[t][i] + perturb, fd));
    }
  }
  return worst;
}

ad::Tensor randn(ad::Shape shape, Rng& rng, double stddev = 1.0,
                 bool requires_grad = true) {
  ad::Tensor t = ad::Tensor::zeros(std::move(shape), requires_grad);
  for (double& v : t.mutable_data()) v = rng.normal(0.0, stddev);
  return t;
}

// loss = sum(y * fixed_random_weights): gives every output coordinate a
// distinct upstream gradient so backward rules cannot pass by symmetry.
ad::Tensor weighted_sum(ad::Tape& tape, const ad::Tensor& y,
                        const ad::Tensor& weights) {
  return tape.sum(tape.mul(y, weights));
}

using CaseFn = std::function<double(Rng&, const Options&)>;

struct Case {
  std::string name;
  bool is_model;
  CaseFn run;
};

double run_points(Rng& rng, const Options& opts,
                  const std::function<double(Rng&)>& one_point) {
  double worst = 0.0;
  for (int i = 0; i < opts.points; ++i) {
    worst = std::max(worst, one_point(rng));
  }
  return worst;
}

double model_case(models::Family family, Rng& rng, const Options& opts) {
  models::ModelConfig cfg;
  cfg.family = family;
  cfg.embed_dim = 8;
  cfg.depth = 2;
  cfg.expansion = 2;
  cfg.patch_size = 4;
  cfg.filter_size = 3;
  cfg.heads = 2;
  cfg.num_classes = 5;
  cfg.image_size = 8;
  cfg.channels = 3;
  cfg.init.learnable_scalar_bias = true;  // exercise that gradient path too

  models::TinyModel model = models::build_model(cfg);
  // Randomize every parameter: the stock zero-init head (and zero betas)
  // would zero out most upstream gradients and make the check vacuous.
  std::vector<ad::Tensor> params;
  for (auto& [name, tensor] : model.params_) {
    for (double& v : tensor.mutable_data()) v = rng.normal(0.0, 0.3);
    if (name.ends_with("gamma")) {
      for (double& v : tensor.mutable_data()) v += 1.0;
    }
    params.push_back(tensor);
  }

  ad::Tensor images = randn({2, 3, 8, 8}, rng, 1.0, false);
  const std::vector<int> labels = {1, 3};
  return check_params(
      std::move(params),
      [&](ad::Tape& tape) {
        return tape.cross_entropy(model.forward(tape, images), labels);
      },
      opts.step);
}

std::vector<Case> build_cases() {
  std::vector<Case> cases;
  auto prim = [&](std::string name, CaseFn fn) {
    cases.push_back({std::move(name), false, std::move(fn)});
  };

  prim("matmul", [](Rng& rng, const Options& o) {
    return run_points(rng, o, [&](Rng& r) {
      ad::Tensor a = randn({3, 4}, r);
      ad::Tensor b = randn({4, 2}, r);
      ad::Tensor w = randn({3, 2}, r, 1.0, false);
      return check_params({a, b}, [&](ad::Tape& t) {
        return weighted_sum(t, t.matmul(a, b), w);
      }, o.step);
    });
  });
  prim("matmul_batched", [](Rng& rng, const Options& o) {
    return run_points(rng, o, [&](Rng& r) {
      ad::Tensor a = randn({2, 3, 2}, r);
      ad::Tensor b = randn({2, 2, 3}, r);
      ad::Tensor w = randn({2, 3, 3}, r, 1.0, false);
      return check_params({a, b}, [&](ad::Tape& t) {
        return weighted_sum(t, t.matmul(a, b), w);
      }, o.step);
    });
  });
  prim("add", [](Rng& rng, const Options& o) {
    return run_points(rng, o, [&](Rng& r) {
      ad::Tensor a = randn({3, 4}, r);
      ad::Tensor b = randn({3, 4}, r);
      ad::Tensor w = randn({3, 4}, r, 1.0, false);
      return check_params({a, b}, [&](ad::Tape& t) {
        return weighted_sum(t, t.add(a, b), w);
      }, o.step);
    });
  });
  prim("add_broadcast", [](Rng& rng, const Options& o) {
    return run_points(rng, o, [&](Rng& r) {
      ad::Tensor a = randn({2, 3, 4}, r);
      ad::Tensor b = randn({4}, r);
      ad::Tensor w = randn({2, 3, 4}, r, 1.0, false);
      return check_params({a, b}, [&](ad::Tape& t) {
        return weighted_sum(t, t.add(a, b), w);
      }, o.step);
    });
  });
  prim("mul", [](Rng& rng, const Options& o) {
    return run_points(rng, o, [&](Rng& r) {
      ad::Tensor a = randn({3, 4}, r);
      ad::Tensor b = randn({3, 4}, r);
      ad::Tensor w = randn({3, 4}, r, 1.0, false);
      return check_params({a, b}, [&](ad::Tape& t) {
        return weighted_sum(t, t.mul(a, b), w);
      }, o.step);
    });
  });
  prim("mul_broadcast", [](Rng& rng, const Options& o) {
    return run_points(rng, o, [&](Rng& r) {
      ad::Tensor a = randn({2, 3}, r);
      ad::Tensor s = ad::Tensor::scalar(r.normal(), true);
      ad::Tensor w = randn({2, 3}, r, 1.0, false);
      return check_params({a, s}, [&](ad::Tape& t) {
        return weighted_sum(t, t.mul(a, s), w);
      }, o.step);
    });
  });
  prim("scale", [](Rng& rng, const Options& o) {
    return run_points(rng, o, [&](Rng& r) {
      ad::Tensor a = randn({3, 4}, r);
      ad::Tensor w = randn({3, 4}, r, 1.0, false);
      return check_params({a}, [&](ad::Tape& t) {
        return weighted_sum(t, t.scale(a, 1.7), w);
      }, o.step);
    });
  });
  prim("gelu", [](Rng& rng, const Options& o) {
    const double perturb = g_inject_fault ? 0.01 : 0.0;
    return run_points(rng, o, [&](Rng& r) {
      ad::Tensor x = randn({4, 4}, r);
      ad::Tensor w = randn({4, 4}, r, 1.0, false);
      return check_params({x}, [&](ad::Tape& t) {
        return weighted_sum(t, t.gelu(x), w);
      }, o.step, perturb);
    });
  });
  prim("layernorm", [](Rng& rng, const Options& o) {
    return run_points(rng, o, [&](Rng& r) {
      ad::Tensor x = randn({3, 6}, r);
      ad::Tensor gamma = randn({6}, r);
      ad::Tensor beta = randn({6}, r);
      ad::Tensor w = randn({3, 6}, r, 1.0, false);
      return check_params({x, gamma, beta}, [&](ad::Tape& t) {
        return weighted_sum(t, t.layernorm(x, gamma, beta, 1e-5), w);
      }, o.step);
    });
  });
  prim("softmax", [](Rng& rng, const Options& o) {
    return run_points(rng, o, [&](Rng& r) {
      ad::Tensor x = randn({3, 5}, r);
      ad::Tensor w = randn({3, 5}, r, 1.0, false);
      return check_params({x}, [&](ad::Tape& t) {
        return weighted_sum(t, t.softmax(x), w);
      }, o.step);
    });
  });
  prim("depthwise_conv2d", [](Rng& rng, const Options& o) {
    return run_points(rng, o, [&](Rng& r) {
      ad::Tensor x = randn({2, 2, 4, 4}, r);
      ad::Tensor k = randn({2, 3, 3}, r);
      ad::Tensor w = randn({2, 2, 4, 4}, r, 1.0, false);
      return check_params({x, k}, [&](ad::Tape& t) {
        return weighted_sum(t, t.depthwise_conv2d(x, k), w);
      }, o.step);
    });
  });
  prim("cross_entropy", [](Rng& rng, const Options& o) {
    return run_points(rng, o, [&](Rng& r) {
      ad::Tensor logits = randn({4, 5}, r);
      const std::vector<int> labels = {0, 3, 2, 4};
      return check_params({logits}, [&](ad::Tape& t) {
        return t.scale(t.cross_entropy(logits, labels), 1.3);
      }, o.step);
    });
  });
  prim("reshape", [](Rng& rng, const Options& o) {
    return run_points(rng, o, [&](Rng& r) {
      ad::Tensor x = randn({3, 4}, r);
      ad::Tensor w = randn({2, 6}, r, 1.0, false);
      return check_params({x}, [&](ad::Tape& t) {
        return weighted_sum(t, t.reshape(x, {2, 6}), w);
      }, o.step);
    });
  });
  prim("transpose", [](Rng& rng, const Options& o) {
    return run_points(rng, o, [&](Rng& r) {
      ad::Tensor x = randn({2, 3, 4}, r);
      ad::Tensor w = randn({4, 3, 2}, r, 1.0, false);
      return check_params({x}, [&](ad::Tape& t) {
        return weighted_sum(t, t.transpose(x, 0, 2), w);
      }, o.step);
    });
  });
  prim("mean_pool_tokens", [](Rng& rng, const Options& o) {
    return run_points(rng, o, [&](Rng& r) {
      ad::Tensor x = randn({2, 3, 4}, r);
      ad::Tensor w = randn({2, 4}, r, 1.0, false);
      return check_params({x}, [&](ad::Tape& t) {
        return weighted_sum(t, t.mean_pool_tokens(x), w);
      }, o.step);
    });
  });
  prim("sum", [](Rng& rng, const Options& o) {
    return run_points(rng, o, [&](Rng& r) {
      ad::Tensor x = randn({3, 3}, r);
      return check_params({x}, [&](ad::Tape& t) {
        return t.scale(t.sum(x), 0.7);
      }, o.step);
    });
  });
  prim("patchify", [](Rng& rng, const Options& o) {
    return run_points(rng, o, [&](Rng& r) {
      ad::Tensor x = randn({2, 2, 4, 4}, r);
      ad::Tensor w = randn({2, 4, 8}, r, 1.0, false);
      return check_params({x}, [&](ad::Tape& t) {
        return weighted_sum(t, t.patchify(x, 2), w);
      }, o.step);
    });
  });

  cases.push_back({"model_convnext", true, [](Rng& rng, const Options& o) {
    return model_case(models::Family::convnext, rng, o);
  }});
  cases.push_back({"model_vit", true, [](Rng& rng, const Options& o) {
    return model_case(models::Family::vit, rng, o);
  }});
  return cases;
}

const std::vector<Case>& all_cases() {
  static const std::vector<Case> cases = build_cases();
  return cases;
}

}  // namespace

void set_fault_injection(bool enabled) { g_inject_fault = enabled; }
bool fault_injection() { return g_inject_fault; }

std::vector<std::string> case_names() {
  std::vector<std::string> names;
  for (const Case& c : all_cases()) names.push_back(c.name);
  return names;
}

CaseResult run_case(std::string_view name, const Options& opts) {
  for (const Case& c : all_cases()) {
    if (c.name == name) {
      Rng rng(derive_stream(opts.seed, "gradcheck:" + c.name));
      CaseResult result;
      result.name = c.name;
      result.tolerance = c.is_model ? opts.model_tol : opts.primitive_tol;
      result.worst_rel_err = c.run(rng, opts);
      result.passed = result.worst_rel_err <= result.tolerance;
      return result;
    }
  }
  throw UsageError("unknown gradcheck case '" + std::string(name) + "'");
}

std::vector<CaseResult> run_suite(const Options& opts,
                                  std::span<const std::string> filter) {
  std::vector<CaseResult> results;
  if (filter.empty()) {
    for (const Case& c : all_cases()) results.push_back(run_case(c.name, opts));
  } else {
    for (const std::string& name : filter) {
      results.push_back(run_case(name, opts));
    }
  }
  return results;
}

}  // namespace mimetic::gradcheck
