#pragma once

// Similarity-driven batch formation, the inner-batch distillation loss
// (teacher cosine alignment plus feature variance), consistency filtering
// into a residual pool, and Riemannian gradient descent of the same loss on
// a product of unit spheres.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "repair/numeric.hpp"
#include "repair/side_memory.hpp"
#include "repair/toy_lm.hpp"

namespace repair {

struct KDConfig {
  double lambda_cos = 0.2;   // weight of the teacher-cosine term
  double theta_var = 0.1;    // weight of the variance term (ϑ)
  double eps_cons = 0.3;     // per-sample eviction threshold, inclusive
  double temperature = 0.0;  // > 0 enables the soft logit distillation term
  std::size_t batch_size = 4;
  std::size_t max_recluster_rounds = 3;

  void validate() const {
    if (!(lambda_cos >= 0.0)) throw std::invalid_argument("kd.lambda_cos must be >= 0");
    if (!(theta_var >= 0.0)) throw std::invalid_argument("kd.theta_var must be >= 0");
    if (!(eps_cons > 0.0)) throw std::invalid_argument("kd.eps_cons must be > 0");
    if (!(temperature >= 0.0)) throw std::invalid_argument("kd.temperature must be >= 0");
    if (batch_size < 2) throw std::invalid_argument("kd.batch_size must be >= 2");
  }
};

struct FeatureSample {
  SampleId id = 0;
  Vector feature;  // unit norm
};

struct Batch {
  SampleId teacher = 0;
  std::vector<SampleId> students;
  std::vector<Vector> features;  // teacher first, then students in order; unit norm
  std::vector<Vector> logits;    // optional, same order; used only when T > 0

  std::size_t size() const { return 1 + students.size(); }
  std::vector<SampleId> members() const {
    std::vector<SampleId> out{teacher};
    out.insert(out.end(), students.begin(), students.end());
    return out;
  }
};

struct ResidualEntry {
  double last_kd = 0.0;
  std::size_t rounds = 0;
};

/// Samples evicted from their batch, waiting to be re-batched.
class ResidualPool {
 public:
  void add(SampleId id, double kd_loss) {
    auto& e = entries_[id];
    e.last_kd = kd_loss;
    e.rounds += 1;
  }
  bool contains(SampleId id) const { return entries_.contains(id); }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::map<SampleId, ResidualEntry>& entries() const { return entries_; }

  /// Removes and returns every entry; callers re-batch them.
  std::map<SampleId, ResidualEntry> drain() { return std::exchange(entries_, {}); }

  void restore(SampleId id, ResidualEntry entry) { entries_[id] = entry; }

 private:
  std::map<SampleId, ResidualEntry> entries_;
};

struct BatchPlan {
  std::vector<Batch> batches;
  std::vector<SampleId> residual;
};

/// Greedy medoid seeding: the teacher maximizes mean cosine to the rest of the
/// pool; its b-1 nearest neighbours become students. Ties go to the lowest id.
/// A single leftover sample is returned as residual.
inline BatchPlan form_batches(std::vector<FeatureSample> samples, std::size_t b) {
  if (b < 2) throw std::invalid_argument("form_batches: batch size must be >= 2");
  std::sort(samples.begin(), samples.end(),
            [](const FeatureSample& x, const FeatureSample& y) { return x.id < y.id; });
  for (const auto& s : samples) {
    if (std::abs(l2_norm(s.feature) - 1.0) > 1e-9) {
      throw std::invalid_argument("form_batches: feature of sample " + std::to_string(s.id) +
                                  " is not unit-normalized");
    }
  }
  const std::size_t n = samples.size();
  std::vector<std::vector<double>> sim(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      sim[i][j] = sim[j][i] = dot(samples[i].feature.values(), samples[j].feature.values());

  BatchPlan plan;
  std::vector<std::size_t> pool(n);
  for (std::size_t i = 0; i < n; ++i) pool[i] = i;

  while (pool.size() >= 2) {
    std::size_t teacher_pos = 0;
    double best_mean = -2.0;
    for (std::size_t pi = 0; pi < pool.size(); ++pi) {
      double acc = 0.0;
      for (std::size_t pj = 0; pj < pool.size(); ++pj)
        if (pj != pi) acc += sim[pool[pi]][pool[pj]];
      const double mean = acc / static_cast<double>(pool.size() - 1);
      if (mean > best_mean) {
        best_mean = mean;
        teacher_pos = pi;
      }
    }
    const std::size_t teacher = pool[teacher_pos];
    std::vector<std::size_t> rest;
    for (std::size_t pi = 0; pi < pool.size(); ++pi)
      if (pi != teacher_pos) rest.push_back(pool[pi]);
    // pool is id-ordered, so a stable sort keeps the lowest id first on ties.
    std::stable_sort(rest.begin(), rest.end(), [&](std::size_t x, std::size_t y) {
      return sim[teacher][x] > sim[teacher][y];
    });
    const std::size_t take = std::min(b - 1, rest.size());

    Batch batch;
    batch.teacher = samples[teacher].id;
    batch.features.push_back(samples[teacher].feature);
    std::vector<std::size_t> chosen(rest.begin(), rest.begin() + static_cast<long>(take));
    for (std::size_t idx : chosen) {
      batch.students.push_back(samples[idx].id);
      batch.features.push_back(samples[idx].feature);
    }
    plan.batches.push_back(std::move(batch));

    std::vector<std::size_t> next;
    for (std::size_t idx : pool) {
      if (idx == teacher) continue;
      if (std::find(chosen.begin(), chosen.end(), idx) != chosen.end()) continue;
      next.push_back(idx);
    }
    pool = std::move(next);
  }
  for (std::size_t idx : pool) plan.residual.push_back(samples[idx].id);
  return plan;
}

struct KDLoss {
  double total = 0.0;
  double cosine_term = 0.0;    // L_cos before weighting
  double variance_term = 0.0;  // L_var before weighting
  double soft_term = 0.0;      // mean KL(p_0 || p_i); 0 unless T > 0
  /// One entry per student: λ(1 - cos(o_i, o_0)) + ϑ ||o_i - o_mean||^2.
  std::vector<double> per_sample;
};

inline double kl_divergence(const Vector& p_log, const Vector& q_log) {
  double acc = 0.0;
  for (std::size_t i = 0; i < p_log.dim(); ++i) acc += std::exp(p_log[i]) * (p_log[i] - q_log[i]);
  return acc;
}

/// Inner-batch distillation loss over unit features (teacher at index 0).
inline KDLoss kd_loss(const Batch& batch, const KDConfig& cfg) {
  const std::size_t b = batch.features.size();
  if (b < 2) throw std::invalid_argument("kd_loss: batch needs a teacher and a student");
  std::vector<Vector> o;
  o.reserve(b);
  for (const auto& f : batch.features) o.push_back(normalized(f));

  const std::size_t d = o[0].dim();
  Vector mean(d);
  for (const auto& v : o) mean += v;
  mean *= 1.0 / static_cast<double>(b);

  KDLoss out;
  std::vector<double> var_contrib(b);
  for (std::size_t i = 0; i < b; ++i) {
    const Vector diff = o[i] - mean;
    var_contrib[i] = dot(diff.values(), diff.values());
    out.variance_term += var_contrib[i];
  }
  out.variance_term /= static_cast<double>(b);
  for (std::size_t i = 1; i < b; ++i) {
    const double cos_dist = 1.0 - dot(o[i].values(), o[0].values());
    out.cosine_term += cos_dist;
    out.per_sample.push_back(cfg.lambda_cos * cos_dist + cfg.theta_var * var_contrib[i]);
  }
  out.cosine_term /= static_cast<double>(b - 1);
  out.total = cfg.lambda_cos * out.cosine_term + cfg.theta_var * out.variance_term;

  if (cfg.temperature > 0.0 && batch.logits.size() == b) {
    const Vector teacher = log_softmax(batch.logits[0], cfg.temperature);
    for (std::size_t i = 1; i < b; ++i) {
      out.soft_term += kl_divergence(teacher, log_softmax(batch.logits[i], cfg.temperature));
    }
    out.soft_term /= static_cast<double>(b - 1);
    out.total += out.soft_term;
  }
  return out;
}

/// Value and gradient of λ L_cos + ϑ L_var with respect to the raw
/// (unnormalized) features, one per row; row 0 is the teacher.
inline LossAndGrad kd_loss_raw(const Matrix& raw, const KDConfig& cfg) {
  const std::size_t b = raw.rows();
  const std::size_t d = raw.cols();
  if (b < 2) throw std::invalid_argument("kd_loss_raw: batch needs a teacher and a student");
  std::vector<Vector> o(b);
  std::vector<double> norms(b);
  for (std::size_t i = 0; i < b; ++i) {
    auto r = raw.row(i);
    norms[i] = l2_norm(r);
    if (!(norms[i] > 0.0)) throw NumericError("kd_loss_raw: zero-norm feature");
    o[i] = Vector(std::vector<double>(r.begin(), r.end())) * (1.0 / norms[i]);
  }
  Vector mean(d);
  for (const auto& v : o) mean += v;
  mean *= 1.0 / static_cast<double>(b);

  const double bm1 = static_cast<double>(b - 1);
  const double bd = static_cast<double>(b);
  LossAndGrad out{0.0, Matrix(b, d)};
  std::vector<Vector> g_unit(b, Vector(d));
  for (std::size_t i = 0; i < b; ++i) {
    const Vector diff = o[i] - mean;
    out.value += cfg.theta_var * dot(diff.values(), diff.values()) / bd;
    // The mean's dependence cancels because the deviations sum to zero.
    g_unit[i] += diff * (2.0 * cfg.theta_var / bd);
  }
  for (std::size_t i = 1; i < b; ++i) {
    out.value += cfg.lambda_cos * (1.0 - dot(o[i].values(), o[0].values())) / bm1;
    g_unit[i] -= o[0] * (cfg.lambda_cos / bm1);
    g_unit[0] -= o[i] * (cfg.lambda_cos / bm1);
  }
  // Chain through o = z / ||z||: dz = (g - (g·o) o) / ||z||.
  for (std::size_t i = 0; i < b; ++i) {
    const double go = dot(g_unit[i].values(), o[i].values());
    auto row = out.grad.row(i);
    for (std::size_t j = 0; j < d; ++j) row[j] = (g_unit[i][j] - go * o[i][j]) / norms[i];
  }
  return out;
}

/// dKL(p_0 || softmax(z_i / T)) / dz_i = (p_i - p_0) / T.
inline Vector soft_kd_student_grad(const Vector& teacher_logits, const Vector& student_logits,
                                   double temperature) {
  const Vector p0 = softmax(teacher_logits, temperature);
  Vector g = softmax(student_logits, temperature);
  g -= p0;
  g *= 1.0 / temperature;
  return g;
}

/// Evicts every student whose per-sample loss is >= eps_cons into the
/// residual pool. A batch left with only its teacher dissolves and the
/// teacher joins the residual pool as well.
inline std::vector<Batch> filter_and_recluster(const std::vector<Batch>& batches,
                                               const std::vector<std::vector<double>>& losses,
                                               const KDConfig& cfg, ResidualPool& residual) {
  if (losses.size() != batches.size()) {
    throw std::invalid_argument("filter_and_recluster: one loss list per batch required");
  }
  std::vector<Batch> kept;
  for (std::size_t bi = 0; bi < batches.size(); ++bi) {
    const Batch& in = batches[bi];
    if (losses[bi].size() != in.students.size()) {
      throw std::invalid_argument("filter_and_recluster: one loss per student required");
    }
    Batch out;
    out.teacher = in.teacher;
    out.features.push_back(in.features[0]);
    if (!in.logits.empty()) out.logits.push_back(in.logits[0]);
    for (std::size_t s = 0; s < in.students.size(); ++s) {
      if (losses[bi][s] >= cfg.eps_cons) {
        residual.add(in.students[s], losses[bi][s]);
        continue;
      }
      out.students.push_back(in.students[s]);
      out.features.push_back(in.features[s + 1]);
      if (!in.logits.empty()) out.logits.push_back(in.logits[s + 1]);
    }
    if (out.students.empty() && !in.students.empty()) {
      residual.add(out.teacher, 0.0);
      continue;
    }
    kept.push_back(std::move(out));
  }
  return kept;
}

/// Lipschitz bound on the Riemannian gradient of the sphere KD loss.
inline double sphere_kd_smoothness(const KDConfig& cfg, std::size_t m) {
  const double md = static_cast<double>(m);
  return 2.0 * cfg.lambda_cos / md + 4.0 * cfg.theta_var / md;
}

/// λ (1/m) Σ (1 - <o_i, u>) + ϑ (1/m) Σ ||o_i - μ||^2 with a fixed teacher direction u.
inline double sphere_kd_loss(std::span<const Vector> o, const Vector& u, const KDConfig& cfg) {
  const double md = static_cast<double>(o.size());
  Vector mu(u.dim());
  for (const auto& v : o) mu += v;
  mu *= 1.0 / md;
  double cos_part = 0.0;
  double var_part = 0.0;
  for (const auto& v : o) {
    cos_part += 1.0 - dot(v.values(), u.values());
    const Vector diff = v - mu;
    var_part += dot(diff.values(), diff.values());
  }
  return cfg.lambda_cos * cos_part / md + cfg.theta_var * var_part / md;
}

struct SphereRun {
  std::vector<Vector> features;
  double loss = 0.0;
  std::vector<double> loss_history;  // initial loss first
  std::size_t steps_taken = 0;
};

/// Riemannian gradient descent with retraction R_o(v) = (o + v) / ||o + v||,
/// starting from the supplied unit vectors. Stops early once the Riemannian
/// gradient vanishes.
inline SphereRun sphere_rgd_run(const Vector& u, std::vector<Vector> o, std::size_t steps,
                                double eta, const KDConfig& cfg) {
  const std::size_t m = o.size();
  if (m < 2) throw std::invalid_argument("sphere_rgd: need m >= 2");
  if (std::abs(l2_norm(u) - 1.0) > 1e-9) throw std::invalid_argument("sphere_rgd: u must be unit");
  const double lr = sphere_kd_smoothness(cfg, m);
  if (!(eta > 0.0) || (lr > 0.0 && !(eta < 2.0 / lr))) {
    throw std::invalid_argument("sphere_rgd: step size " + std::to_string(eta) +
                                " outside (0, 2/L_R) with L_R = " + std::to_string(lr));
  }
  const double md = static_cast<double>(m);
  SphereRun run;
  run.loss_history.push_back(sphere_kd_loss(o, u, cfg));
  for (std::size_t t = 0; t < steps; ++t) {
    Vector mu(u.dim());
    for (const auto& v : o) mu += v;
    mu *= 1.0 / md;
    std::vector<Vector> grads(m);
    double grad_sq = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      Vector g = u * (-cfg.lambda_cos / md) + (o[i] - mu) * (2.0 * cfg.theta_var / md);
      const double radial = dot(g.values(), o[i].values());
      g -= o[i] * radial;
      grad_sq += dot(g.values(), g.values());
      grads[i] = std::move(g);
    }
    if (std::sqrt(grad_sq) <= 1e-14) break;
    for (std::size_t i = 0; i < m; ++i) o[i] = normalized(o[i] - grads[i] * eta);
    run.loss_history.push_back(sphere_kd_loss(o, u, cfg));
    ++run.steps_taken;
  }
  run.loss = run.loss_history.back();
  run.features = std::move(o);
  return run;
}

/// Runs sphere_rgd_run from m random unit vectors drawn with `seed`.
inline SphereRun sphere_rgd_converge(const Vector& u, std::size_t m, std::size_t steps,
                                     double eta, const KDConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Vector> o(m, Vector(u.dim()));
  for (auto& v : o) {
    for (double& x : v) x = normal(rng);
    v = normalized(v);
  }
  return sphere_rgd_run(u, std::move(o), steps, eta, cfg);
}

}  // namespace repair
