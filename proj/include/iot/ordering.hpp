#pragma once

#include <string>
#include <vector>

#include "iot/rng.hpp"
#include "iot/tensor.hpp"

namespace iot {

// The three reorderable sublayers. ED exists only in decoder stacks.
enum class LayerKind { SA, ED, FF };

const char* layer_kind_name(LayerKind k);

// A sequence of distinct layer kinds applied inside one block.
struct LayerOrder {
    std::vector<LayerKind> kinds;

    bool contains(LayerKind k) const;
    std::string str() const;  // "SA->ED->FF"
    bool operator==(const LayerOrder&) const = default;
};

enum class StackRole { encoder, decoder };

// Indexed family of candidate orders. Codes follow the fixed numbering:
// decoder 1:SA->ED->FF, 2:FF->SA->ED, 3:ED->FF->SA, 4:ED->SA->FF,
// 5:SA->FF->ED, 6:FF->ED->SA; encoder 1:SA->FF, 2:FF->SA.
struct OrderSet {
    StackRole role = StackRole::decoder;
    std::vector<int> codes;          // 1-based codes, ascending
    std::vector<LayerOrder> orders;  // aligned with codes

    size_t size() const { return codes.size(); }
};

LayerOrder decoder_order_for_code(int code);
LayerOrder encoder_order_for_code(int code);
OrderSet order_set_for_codes(StackRole role, const std::vector<int>& codes);

// All permutations of the given kind set, indexed by the fixed coding.
// Accepts {SA, FF}, {SA, ED, FF}, and single-kind sets (test use).
OrderSet enumerate_orders(const std::vector<LayerKind>& kinds);

// The standard decoder subsets for a given candidate count:
// 2 -> {4,6}, 3 -> {1,4,6}, 4 -> {1,2,4,6}, 5 -> {1,2,4,5,6}, 6 -> all.
OrderSet order_subset(int n);

// Routing predictor output for one instance and one stack side.
struct RoutingDecision {
    Var summary;       // s_e or s_d
    Var pi;            // softmax confidences, pre-clamp
    Tensor gumbel;     // noise used for the soft weights (empty at inference)
    Var weights;       // gamma or lambda (training only)
    int selected = 0;  // argmax position within the OrderSet
};

// Mean over non-pad positions of states [T, d]; mask is 1 for real tokens.
Var sentence_summary(const Var& states, const Var& pad_mask);

// pi = softmax(summary . W); differentiable into both inputs.
Var predictor_probs(const Var& summary, const Var& w);

double gumbel_from_uniform(double u);
Tensor gumbel_noise(int64_t k, RngStream& rng);

// softmax((log pi + g) / tau). pi must already be clamped away from zero.
Var gumbel_softmax_weights(const Var& pi, const Tensor& g, double tau);

// argmax(summary . W) with ties broken toward the lowest index.
int select_argmax(const Var& summary, const Var& w);

}  // namespace iot
