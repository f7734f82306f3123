#pragma once

#include <span>
#include <string>
#include <string_view>

#include "ksanc/attention.hpp"
#include "ksanc/nets.hpp"

namespace ksanc {

struct LossWeights {
  double lambda1 = 1.0;  // backbone logits
  double lambda2 = 1.0;  // adversarial
  double lambda3 = 1.0;  // intermediate descriptors
  double mu = 1.0;       // discriminator regularizer

  void validate() const;
};

enum class StepRole { student_step, discriminator_step, teacher_step, supervised_step };

std::string_view to_string(StepRole role);
StepRole parse_step_role(std::string_view text);

/// Which distillation terms a student is trained with. The supervised
/// baseline trains the student on labels alone.
struct LossMask {
  bool backbone = true;
  bool adversarial = true;
  bool intermediate = true;
  bool supervised = false;

  /// Accepts a list over {b, adv, is} separated by ',' or '+', or "sup"
  /// for the baseline.
  static LossMask parse(std::string_view text);
  static LossMask supervised_only();
  /// "b+adv+is" form, safe inside CSV cells and directory names.
  std::string to_string() const;
  bool operator==(const LossMask&) const = default;
};

/// Scalar loss terms of one optimization step. Terms a step does not use
/// are zero. `L_sup` carries label cross-entropy for teacher pretraining and
/// the supervised baseline; it is zero in every distillation step.
struct LossBundle {
  StepRole role = StepRole::student_step;
  Tensor L_b, L_adv_o, L_reg, L_adv_C, L_adv, L_is, L_sup, total;
};

/// Plain values of a LossBundle, as logged.
struct LossRecord {
  StepRole role = StepRole::student_step;
  double L_b = 0, L_adv_o = 0, L_reg = 0, L_adv_C = 0, L_adv = 0, L_is = 0, L_sup = 0, total = 0;
};

LossRecord record_of(const LossBundle& bundle);

/// Checks total = l1*L_b + l2*L_adv + l3*L_is + L_sup and
/// L_adv = L_adv_o + L_reg + L_adv_C to `rel_tol`. On failure writes the
/// broken identity into `why` when given.
bool composition_holds(const LossRecord& r, const LossWeights& w, double rel_tol,
                       std::string* why = nullptr);

/// Mean over the batch of the squared L2 distance between logit rows.
Tensor backbone_loss(const Tensor& student_logits, const Tensor& teacher_logits);

/// Mean over the batch of the squared L2 distance between concatenated
/// descriptors. The teacher side is detached.
Tensor intermediate_loss(const SqueezedDescriptors& student, const SqueezedDescriptors& teacher);

/// Sum of |w| + w^2 over every discriminator parameter.
Tensor weight_penalty(const Module& module);

struct AdversarialParts {
  Tensor L_adv_o, L_reg, L_adv_C;
};

/// Discriminator step (both logit inputs are detached):
///   L_adv_o = BCE(D(t).real, 1) + BCE(D(s).real, 0)
///   L_reg   = mu * penalty(D) + mu * BCE(D(s).real, 1)
///   L_adv_C = CE(D(t).class, y) + CE(D(s).class, y)
/// Student step (the caller keeps the discriminator frozen through the
/// backward pass, e.g. with FreezeGuard):
///   L_adv_o = BCE(D(s).real, 1), L_reg = 0, L_adv_C = CE(D(s).class, y)
AdversarialParts adversarial_losses(Discriminator& disc, const Tensor& teacher_logits,
                                    const Tensor& student_logits, std::span<const int> labels,
                                    const LossWeights& weights, StepRole role);

/// Parts of a bundle before weighting. Undefined tensors count as zero.
struct LossParts {
  Tensor L_b, L_adv_o, L_reg, L_adv_C, L_is, L_sup;
};

/// Fills L_adv and total. Throws DivergenceError naming the first part
/// that is NaN or infinite.
LossBundle total_loss(const LossParts& parts, const LossWeights& weights, StepRole role,
                      DType dtype = DType::f32);

/// Marks a module non-trainable while alive and restores the previous
/// per-parameter flags afterwards.
class FreezeGuard {
 public:
  explicit FreezeGuard(const Module& module);
  ~FreezeGuard();
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  std::vector<std::pair<Tensor, bool>> saved_;
};

}  // namespace ksanc
