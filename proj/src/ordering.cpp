#include "iot/ordering.hpp"

#include <algorithm>
#include <cmath>

namespace iot {

namespace {

const std::vector<LayerOrder>& decoder_orders_by_code() {
    static const std::vector<LayerOrder> table = {
        {{LayerKind::SA, LayerKind::ED, LayerKind::FF}},  // 1
        {{LayerKind::FF, LayerKind::SA, LayerKind::ED}},  // 2
        {{LayerKind::ED, LayerKind::FF, LayerKind::SA}},  // 3
        {{LayerKind::ED, LayerKind::SA, LayerKind::FF}},  // 4
        {{LayerKind::SA, LayerKind::FF, LayerKind::ED}},  // 5
        {{LayerKind::FF, LayerKind::ED, LayerKind::SA}},  // 6
    };
    return table;
}

const std::vector<LayerOrder>& encoder_orders_by_code() {
    static const std::vector<LayerOrder> table = {
        {{LayerKind::SA, LayerKind::FF}},  // 1
        {{LayerKind::FF, LayerKind::SA}},  // 2
    };
    return table;
}

}  // namespace

const char* layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::SA: return "SA";
        case LayerKind::ED: return "ED";
        case LayerKind::FF: return "FF";
    }
    return "?";
}

bool LayerOrder::contains(LayerKind k) const {
    return std::find(kinds.begin(), kinds.end(), k) != kinds.end();
}

std::string LayerOrder::str() const {
    std::string s;
    for (size_t i = 0; i < kinds.size(); ++i) {
        if (i) s += "->";
        s += layer_kind_name(kinds[i]);
    }
    return s;
}

LayerOrder decoder_order_for_code(int code) {
    if (code < 1 || code > 6) {
        fail("order: decoder code " + std::to_string(code) + " outside 1..6");
    }
    return decoder_orders_by_code()[code - 1];
}

LayerOrder encoder_order_for_code(int code) {
    if (code < 1 || code > 2) {
        fail("order: encoder code " + std::to_string(code) + " outside 1..2");
    }
    return encoder_orders_by_code()[code - 1];
}

OrderSet order_set_for_codes(StackRole role, const std::vector<int>& codes) {
    if (codes.empty()) fail("order: empty code list");
    OrderSet set;
    set.role = role;
    set.codes = codes;
    std::sort(set.codes.begin(), set.codes.end());
    if (std::adjacent_find(set.codes.begin(), set.codes.end()) != set.codes.end()) {
        fail("order: duplicate codes in order set");
    }
    for (int c : set.codes) {
        set.orders.push_back(role == StackRole::decoder ? decoder_order_for_code(c)
                                                        : encoder_order_for_code(c));
    }
    return set;
}

OrderSet enumerate_orders(const std::vector<LayerKind>& kinds) {
    std::vector<LayerKind> sorted = kinds;
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    if (sorted.size() != kinds.size()) fail("enumerate_orders: repeated kinds");

    const std::vector<LayerKind> enc = {LayerKind::SA, LayerKind::FF};
    const std::vector<LayerKind> dec = {LayerKind::SA, LayerKind::ED, LayerKind::FF};
    auto same_set = [&](const std::vector<LayerKind>& want) {
        std::vector<LayerKind> w = want;
        std::sort(w.begin(), w.end());
        return sorted == w;
    };

    if (same_set(dec)) {
        return order_set_for_codes(StackRole::decoder, {1, 2, 3, 4, 5, 6});
    }
    if (same_set(enc)) {
        return order_set_for_codes(StackRole::encoder, {1, 2});
    }
    if (sorted.size() == 1) {
        // Degenerate single-layer family, used by tests only.
        OrderSet set;
        set.role = sorted[0] == LayerKind::ED ? StackRole::decoder : StackRole::encoder;
        set.codes = {1};
        set.orders = {LayerOrder{{sorted[0]}}};
        return set;
    }
    fail("enumerate_orders: unsupported kind set");
}

OrderSet order_subset(int n) {
    switch (n) {
        case 2: return order_set_for_codes(StackRole::decoder, {4, 6});
        case 3: return order_set_for_codes(StackRole::decoder, {1, 4, 6});
        case 4: return order_set_for_codes(StackRole::decoder, {1, 2, 4, 6});
        case 5: return order_set_for_codes(StackRole::decoder, {1, 2, 4, 5, 6});
        case 6: return order_set_for_codes(StackRole::decoder, {1, 2, 3, 4, 5, 6});
        default: fail("order_subset: n must be in 2..6, got " + std::to_string(n));
    }
}

Var sentence_summary(const Var& states, const Var& pad_mask) {
    return masked_mean_rows(states, pad_mask);
}

Var predictor_probs(const Var& summary, const Var& w) {
    if (summary.value().rank() != 1 || w.value().rank() != 2 ||
        summary.numel() != w.shape()[0]) {
        fail("predictor_probs: expected summary [d] and W [d, K]");
    }
    Var logits = reshape(matmul(reshape(summary, {1, summary.numel()}), w), {w.shape()[1]});
    return softmax_lastdim(logits);
}

double gumbel_from_uniform(double u) {
    return -std::log(-std::log(u));
}

Tensor gumbel_noise(int64_t k, RngStream& rng) {
    Tensor g({k});
    for (int64_t i = 0; i < k; ++i) {
        g[i] = gumbel_from_uniform(rng.next_unit_open());
    }
    return g;
}

Var gumbel_softmax_weights(const Var& pi, const Tensor& g, double tau) {
    if (tau <= 0.0) fail("gumbel_softmax_weights: temperature must be positive");
    if (g.shape() != pi.shape()) fail("gumbel_softmax_weights: noise shape mismatch");
    for (double v : pi.value().data()) {
        if (v <= 0.0) fail("gumbel_softmax_weights: zero probability; clamp upstream");
    }
    Var shifted = add(log_elem(pi), constant(g));
    return softmax_lastdim(scalar_mul(shifted, 1.0 / tau));
}

int select_argmax(const Var& summary, const Var& w) {
    NoGradGuard ng;
    Var logits = reshape(matmul(reshape(summary, {1, summary.numel()}), w), {w.shape()[1]});
    const auto& v = logits.value().data();
    int best = 0;
    for (size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[best]) best = static_cast<int>(i);
    }
    return best;
}

}  // namespace iot
