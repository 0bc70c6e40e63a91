#include "medvit/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <sstream>

#include "medvit/metrics.hpp"
#include "medvit/ops.hpp"

namespace medvit::train {

TrainConfig TrainConfig::medmnist() { return TrainConfig{}; }

TrainConfig TrainConfig::nonmnist() {
  TrainConfig cfg;
  cfg.epochs = 150;
  cfg.batch_size = 64;
  cfg.lr = 1e-4;
  cfg.milestones.clear();
  return cfg;
}

TrainConfig TrainConfig::preset(const std::string& name) {
  if (name == "medmnist") return medmnist();
  if (name == "nonmnist") return nonmnist();
  throw std::invalid_argument("unknown training preset '" + name + "'");
}

void TrainConfig::validate() const {
  if (epochs == 0) throw std::invalid_argument("train config: epochs must be positive");
  if (batch_size == 0) throw std::invalid_argument("train config: batch size must be positive");
  if (!(lr > 0.0)) throw std::invalid_argument("train config: learning rate must be positive");
  if (!(decay > 0.0)) throw std::invalid_argument("train config: decay factor must be positive");
  for (std::size_t i = 0; i < milestones.size(); ++i) {
    if (i > 0 && milestones[i] <= milestones[i - 1]) {
      throw std::invalid_argument("train config: decay epochs must be strictly increasing");
    }
    if (milestones[i] >= epochs) throw std::invalid_argument("train config: decay epoch beyond the last epoch");
  }
  if (adamw.beta1 < 0.0 || adamw.beta1 >= 1.0 || adamw.beta2 < 0.0 || adamw.beta2 >= 1.0) {
    throw std::invalid_argument("train config: betas must lie in [0,1)");
  }
  if (adamw.eps <= 0.0 || adamw.weight_decay < 0.0) {
    throw std::invalid_argument("train config: eps must be positive and weight decay non-negative");
  }
  if (target_train_accuracy < 0.0 || target_train_accuracy > 1.0) {
    throw std::invalid_argument("train config: target accuracy outside [0,1]");
  }
}

double lr_at(std::size_t epoch, const TrainConfig& cfg) {
  double lr = cfg.lr;
  for (auto m : cfg.milestones) {
    if (epoch >= m) lr *= cfg.decay;
  }
  return lr;
}

void adamw_step(std::span<double> theta, std::span<const double> grad, std::span<double> m, std::span<double> v,
                std::uint64_t t, double lr, const AdamWHyper& hyper) {
  if (grad.size() != theta.size() || m.size() != theta.size() || v.size() != theta.size()) {
    throw ShapeError("adamw_step: parameter, gradient and moment sizes differ");
  }
  if (t == 0) throw std::invalid_argument("adamw_step: step count starts at 1");
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!std::isfinite(grad[i])) {
      throw NumericError("adamw_step: non-finite gradient at element " + std::to_string(i));
    }
  }
  const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * grad[i];
    v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * grad[i] * grad[i];
    const double m_hat = m[i] / bc1;
    const double v_hat = v[i] / bc2;
    theta[i] -= lr * hyper.weight_decay * theta[i] + lr * m_hat / (std::sqrt(v_hat) + hyper.eps);
  }
}

AdamW::AdamW(ParameterList params, AdamWHyper hyper) : params_(std::move(params)), hyper_(hyper) {
  for (const auto& p : params_) {
    m_.push_back(Tensor::zeros(p.tensor.shape()));
    v_.push_back(Tensor::zeros(p.tensor.shape()));
  }
}

void AdamW::step(double lr) {
  for (const auto& p : params_) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw NumericError("AdamW: non-finite gradient in '" + p.name + "'; step aborted");
    }
  }
  ++step_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor t = params_[i].tensor;
    if (!t.has_grad()) continue;
    adamw_step(t.values(), t.grad(), m_[i].values(), v_[i].values(), step_, lr, hyper_);
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

std::optional<double> binary_auc(std::span<const double> scores, std::span<const int> positive) {
  if (scores.size() != positive.size()) throw std::invalid_argument("binary_auc: score/label length mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double P = 0.0, N = 0.0;
  for (int p : positive) (p ? P : N) += 1.0;
  if (P == 0.0 || N == 0.0) return std::nullopt;
  // sweep thresholds from high to low; each group of tied scores is one step
  double tp = 0.0, fp = 0.0, area = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    double dtp = 0.0, dfp = 0.0;
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (positive[order[j]] ? dtp : dfp) += 1.0;
      ++j;
    }
    area += (dfp / N) * (tp + tp + dtp) / (2.0 * P);
    tp += dtp;
    fp += dfp;
    i = j;
  }
  return area;
}

std::optional<double> macro_auc(const Tensor& probabilities, std::span<const int> labels) {
  if (probabilities.rank() != 2 || probabilities.dim(0) != labels.size()) {
    throw ShapeError("macro_auc: expected [N,K] scores for " + std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = labels.size(), k = probabilities.dim(1);
  auto column = [&](std::size_t c) {
    std::vector<double> s(n);
    for (std::size_t i = 0; i < n; ++i) s[i] = probabilities.data()[i * k + c];
    return s;
  };
  auto is_class = [&](std::size_t c) {
    std::vector<int> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = labels[i] == static_cast<int>(c);
    return p;
  };
  if (k == 2) return binary_auc(column(1), is_class(1));
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < k; ++c) {
    if (auto a = binary_auc(column(c), is_class(c))) {
      sum += *a;
      ++used;
    }
  }
  if (used == 0) return std::nullopt;
  return sum / static_cast<double>(used);
}

namespace {

struct ModeGuard {
  explicit ModeGuard(nn::Module& m, bool training) : module(m), previous(m.training()) { m.set_training(training); }
  ~ModeGuard() { module.set_training(previous); }
  nn::Module& module;
  bool previous;
};

std::vector<int> argmax_rows(const Tensor& x) {
  const std::size_t rows = x.dim(0), k = x.dim(1);
  std::vector<int> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* p = x.data() + r * k;
    out[r] = static_cast<int>(std::max_element(p, p + k) - p);
  }
  return out;
}

void check_classes(const MedViTModel& model, const data::Dataset& dataset) {
  if (dataset.size() == 0) throw data::DataError("dataset is empty");
  if (dataset.classes != model.config().num_classes) {
    throw std::invalid_argument("dataset has " + std::to_string(dataset.classes) + " classes but the model " +
                                std::to_string(model.config().num_classes));
  }
}

}  // namespace

Predictions predict(MedViTModel& model, const data::Dataset& dataset, std::size_t batch_size) {
  check_classes(model, dataset);
  ModeGuard mode(model, false);
  NoGradGuard no_grad;
  const std::size_t n = dataset.size(), k = model.config().num_classes;
  Predictions out;
  std::vector<double> probs(n * k);
  double loss_sum = 0.0;
  for (std::size_t start = 0; start < n; start += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, n - start));
    std::iota(idx.begin(), idx.end(), start);
    auto [x, y] = dataset.batch(idx);
    const Tensor logits = model.logits(x);
    loss_sum += ops::cross_entropy(logits, y).item() * static_cast<double>(idx.size());
    const Tensor p = ops::softmax(logits, 1);
    std::copy(p.values().begin(), p.values().end(), probs.begin() + static_cast<std::ptrdiff_t>(start * k));
  }
  out.probabilities = Tensor({n, k}, std::move(probs));
  out.predicted = argmax_rows(out.probabilities);
  out.loss = loss_sum / static_cast<double>(n);
  return out;
}

EvalMetrics evaluate(MedViTModel& model, const data::Dataset& dataset, std::size_t batch_size) {
  const Predictions pred = predict(model, dataset, batch_size);
  EvalMetrics m;
  m.samples = dataset.size();
  m.loss = pred.loss;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < m.samples; ++i) correct += pred.predicted[i] == dataset.labels[i];
  m.accuracy = static_cast<double>(correct) / static_cast<double>(m.samples);
  m.auc = macro_auc(pred.probabilities, dataset.labels);
  m.bacc = metrics::balanced_accuracy(dataset.labels, pred.predicted, dataset.classes);
  return m;
}

Trainer::Trainer(MedViTModel& model, TrainConfig cfg)
    : model_(model), cfg_(std::move(cfg)), optimizer_(model.parameters(), cfg_.adamw) {
  cfg_.validate();
}

std::vector<std::vector<std::size_t>> Trainer::epoch_batches(std::size_t n, std::size_t epoch) const {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::seed_seq seq{static_cast<std::uint32_t>(cfg_.seed), static_cast<std::uint32_t>(cfg_.seed >> 32),
                    static_cast<std::uint32_t>(epoch)};
  Rng rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += cfg_.batch_size) {
    const auto end = std::min(n, start + cfg_.batch_size);
    std::vector<std::size_t> b(order.begin() + static_cast<std::ptrdiff_t>(start),
                               order.begin() + static_cast<std::ptrdiff_t>(end));
    if (b.size() == 1 && !batches.empty()) {
      batches.back().push_back(b.front());
    } else {
      batches.push_back(std::move(b));
    }
  }
  return batches;
}

EpochLog Trainer::run_epoch(const data::Dataset& train, const data::Dataset* val) {
  check_classes(model_, train);
  if (epoch_ >= cfg_.epochs) throw std::logic_error("trainer: all epochs already ran");
  EpochLog log;
  log.epoch = epoch_;
  log.lr = lr_at(epoch_, cfg_);
  double loss_sum = 0.0;
  std::size_t correct = 0;
  {
    ModeGuard mode(model_, true);
    for (const auto& idx : epoch_batches(train.size(), epoch_)) {
      auto [x, y] = train.batch(idx);
      optimizer_.zero_grad();
      const Tensor logits = model_.logits(x);
      const Tensor loss = ops::cross_entropy(logits, y);
      loss.backward();
      optimizer_.step(log.lr);
      loss_sum += loss.item() * static_cast<double>(idx.size());
      const auto pred = argmax_rows(logits);
      for (std::size_t i = 0; i < y.size(); ++i) correct += pred[i] == y[i];
    }
    optimizer_.zero_grad();
  }
  log.loss = loss_sum / static_cast<double>(train.size());
  log.train_accuracy = static_cast<double>(correct) / static_cast<double>(train.size());
  if (val != nullptr) log.val_accuracy = evaluate(model_, *val).accuracy;
  ++epoch_;
  return log;
}

std::vector<EpochLog> Trainer::fit(const data::Dataset& train, const data::Dataset* val,
                                   const std::function<void(const EpochLog&)>& on_epoch) {
  std::vector<EpochLog> logs;
  while (epoch_ < cfg_.epochs) {
    logs.push_back(run_epoch(train, val));
    if (on_epoch) on_epoch(logs.back());
    if (cfg_.target_train_accuracy > 0.0 && logs.back().train_accuracy >= cfg_.target_train_accuracy) break;
  }
  return logs;
}

void write_log_header(std::ostream& os) { os << "epoch,lr,loss,train_acc,val_acc\n"; }

void write_log(std::ostream& os, const EpochLog& log) {
  std::ostringstream line;
  line.precision(10);
  line << log.epoch + 1 << "," << log.lr << "," << log.loss << "," << log.train_accuracy << ",";
  if (log.val_accuracy) line << *log.val_accuracy;
  os << line.str() << "\n";
}

}  // namespace medvit::train
