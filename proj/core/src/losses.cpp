#include "ksanc/losses.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace ksanc {

void LossWeights::validate() const {
  const std::pair<const char*, double> all[] = {
      {"lambda1", lambda1}, {"lambda2", lambda2}, {"lambda3", lambda3}, {"mu", mu}};
  for (const auto& [name, v] : all) {
    if (!std::isfinite(v) || v < 0) {
      throw ConfigError(std::string("loss weight ") + name + " must be finite and >= 0");
    }
  }
}

std::string_view to_string(StepRole role) {
  switch (role) {
    case StepRole::student_step: return "student_step";
    case StepRole::discriminator_step: return "discriminator_step";
    case StepRole::teacher_step: return "teacher_step";
    case StepRole::supervised_step: return "supervised_step";
  }
  return "?";
}

StepRole parse_step_role(std::string_view text) {
  for (auto r : {StepRole::student_step, StepRole::discriminator_step, StepRole::teacher_step,
                 StepRole::supervised_step}) {
    if (to_string(r) == text) return r;
  }
  throw Error("unknown step role '" + std::string(text) + "'");
}

LossMask LossMask::parse(std::string_view text) {
  if (text == "sup") return supervised_only();
  LossMask m{false, false, false, false};
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto comma = std::min(text.find_first_of(",+", pos), text.size());
    auto item = text.substr(pos, comma - pos);
    while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
    while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
    if (item == "b") {
      m.backbone = true;
    } else if (item == "adv") {
      m.adversarial = true;
    } else if (item == "is") {
      m.intermediate = true;
    } else if (item == "sup") {
      throw ConfigError("loss mask: 'sup' cannot be combined with other terms");
    } else {
      throw ConfigError("loss mask: unknown term '" + std::string(item) +
                        "' (expected b, adv, is or sup)");
    }
    pos = comma + 1;
  }
  if (!m.backbone && !m.adversarial && !m.intermediate) {
    throw ConfigError("loss mask: empty mask");
  }
  return m;
}

LossMask LossMask::supervised_only() { return LossMask{false, false, false, true}; }

std::string LossMask::to_string() const {
  if (supervised) return "sup";
  std::string s;
  auto append = [&](bool on, const char* name) {
    if (!on) return;
    if (!s.empty()) s += '+';
    s += name;
  };
  append(backbone, "b");
  append(adversarial, "adv");
  append(intermediate, "is");
  return s;
}

namespace {

double value_or_zero(const Tensor& t) { return t.defined() ? t.item() : 0.0; }

}  // namespace

LossRecord record_of(const LossBundle& b) {
  LossRecord r;
  r.role = b.role;
  r.L_b = value_or_zero(b.L_b);
  r.L_adv_o = value_or_zero(b.L_adv_o);
  r.L_reg = value_or_zero(b.L_reg);
  r.L_adv_C = value_or_zero(b.L_adv_C);
  r.L_adv = value_or_zero(b.L_adv);
  r.L_is = value_or_zero(b.L_is);
  r.L_sup = value_or_zero(b.L_sup);
  r.total = value_or_zero(b.total);
  return r;
}

bool composition_holds(const LossRecord& r, const LossWeights& w, double rel_tol,
                       std::string* why) {
  auto close = [&](double actual, double expected, const char* name) {
    const double scale = std::max({std::abs(actual), std::abs(expected), 1e-12});
    if (std::abs(actual - expected) <= rel_tol * scale) return true;
    if (why) {
      std::ostringstream os;
      os.precision(17);
      os << name << ": logged " << actual << ", recomposed " << expected;
      *why = os.str();
    }
    return false;
  };
  return close(r.L_adv, r.L_adv_o + r.L_reg + r.L_adv_C, "L_adv") &&
         close(r.total, w.lambda1 * r.L_b + w.lambda2 * r.L_adv + w.lambda3 * r.L_is + r.L_sup,
               "total");
}

Tensor backbone_loss(const Tensor& student_logits, const Tensor& teacher_logits) {
  if (student_logits.shape() != teacher_logits.shape() || student_logits.rank() != 2) {
    throw ShapeError("backbone_loss: student logits " + shape_str(student_logits.shape()) +
                     " vs teacher logits " + shape_str(teacher_logits.shape()));
  }
  const auto batch = static_cast<double>(student_logits.dim(0));
  return scale(sum(square(sub(student_logits, teacher_logits))), 1.0 / batch);
}

Tensor intermediate_loss(const SqueezedDescriptors& student, const SqueezedDescriptors& teacher) {
  const Tensor& s = student.concatenated;
  const Tensor& t = teacher.concatenated;
  if (s.rank() != 2 || s.shape() != t.shape()) {
    throw ShapeError("intermediate_loss: student descriptors " + shape_str(s.shape()) +
                     " vs teacher descriptors " + shape_str(t.shape()));
  }
  const auto batch = static_cast<double>(s.dim(0));
  return scale(sum(square(sub(s, t.detach()))), 1.0 / batch);
}

Tensor weight_penalty(const Module& module) {
  Tensor total;
  for (const auto& p : module.parameters()) {
    Tensor term = add(sum(abs(p.tensor)), l2_norm_sq(p.tensor));
    total = total.defined() ? add(total, term) : term;
  }
  if (!total.defined()) throw Error("weight_penalty: module has no parameters");
  return total;
}

AdversarialParts adversarial_losses(Discriminator& disc, const Tensor& teacher_logits,
                                    const Tensor& student_logits, std::span<const int> labels,
                                    const LossWeights& weights, StepRole role) {
  if (student_logits.rank() != 2 || student_logits.dim(0) != labels.size()) {
    throw ShapeError("adversarial_losses: " + std::to_string(labels.size()) +
                     " labels for student logits " + shape_str(student_logits.shape()));
  }
  const auto classes = static_cast<int>(disc.num_classes());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes) {
      throw Error("adversarial_losses: label " + std::to_string(labels[i]) + " at index " +
                  std::to_string(i) + " outside [0," + std::to_string(classes) + ")");
    }
  }
  AdversarialParts parts;
  if (role == StepRole::discriminator_step) {
    if (teacher_logits.shape() != student_logits.shape()) {
      throw ShapeError("adversarial_losses: teacher logits " + shape_str(teacher_logits.shape()) +
                       " vs student logits " + shape_str(student_logits.shape()));
    }
    const auto on_teacher = disc.forward(teacher_logits.detach());
    const auto on_student = disc.forward(student_logits.detach());
    parts.L_adv_o = add(binary_cross_entropy(on_teacher.real_score, 1.0),
                        binary_cross_entropy(on_student.real_score, 0.0));
    parts.L_reg = add(scale(weight_penalty(disc), weights.mu),
                      scale(binary_cross_entropy(on_student.real_score, 1.0), weights.mu));
    parts.L_adv_C = add(cross_entropy(on_teacher.class_logits, labels),
                        cross_entropy(on_student.class_logits, labels));
  } else if (role == StepRole::student_step) {
    const auto on_student = disc.forward(student_logits);
    parts.L_adv_o = binary_cross_entropy(on_student.real_score, 1.0);
    parts.L_reg = Tensor::scalar(0.0, student_logits.dtype());
    parts.L_adv_C = cross_entropy(on_student.class_logits, labels);
  } else {
    throw Error("adversarial_losses: role must be student_step or discriminator_step, got " +
                std::string(to_string(role)));
  }
  return parts;
}

LossBundle total_loss(const LossParts& parts, const LossWeights& weights, StepRole role,
                      DType dtype) {
  auto part = [&](const Tensor& t, const char* name) {
    if (!t.defined()) return Tensor::scalar(0.0, dtype);
    if (t.numel() != 1) throw ShapeError(std::string("total_loss: ") + name + " is not a scalar");
    if (!std::isfinite(t.item())) {
      throw DivergenceError(name, std::string("loss component ") + name + " is not finite (" +
                                      std::to_string(t.item()) + ")");
    }
    return t;
  };
  LossBundle b;
  b.role = role;
  b.L_b = part(parts.L_b, "L_b");
  b.L_adv_o = part(parts.L_adv_o, "L_adv_o");
  b.L_reg = part(parts.L_reg, "L_reg");
  b.L_adv_C = part(parts.L_adv_C, "L_adv_C");
  b.L_is = part(parts.L_is, "L_is");
  b.L_sup = part(parts.L_sup, "L_sup");
  b.L_adv = add(add(b.L_adv_o, b.L_reg), b.L_adv_C);
  b.total = add(add(add(scale(b.L_b, weights.lambda1), scale(b.L_adv, weights.lambda2)),
                    scale(b.L_is, weights.lambda3)),
                b.L_sup);
  if (!std::isfinite(b.total.item())) {
    throw DivergenceError("total", "total loss is not finite");
  }
  std::string why;
  if (!composition_holds(record_of(b), weights, 1e-6, &why)) {
    throw Error("total_loss: composition check failed, " + why);
  }
  return b;
}

FreezeGuard::FreezeGuard(const Module& module) {
  for (auto& p : module.parameters()) {
    saved_.emplace_back(p.tensor, p.tensor.requires_grad());
    p.tensor.set_requires_grad(false);
  }
}

FreezeGuard::~FreezeGuard() {
  for (auto& [t, flag] : saved_) t.set_requires_grad(flag);
}

}  // namespace ksanc
