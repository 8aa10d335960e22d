#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lsiq/errors.hpp"

namespace lsiq {

// A named view into trainable storage plus its gradient and moment buffers.
struct ParamEntry {
    std::string name;
    double* data = nullptr;
    size_t size = 0;
    std::vector<double> grad, m, v;
};

struct ParamGroup {
    std::vector<ParamEntry> entries;
    int64_t step = 0;

    void add(const std::string& name, double* data, size_t size) {
        ParamEntry e;
        e.name = name;
        e.data = data;
        e.size = size;
        e.grad.assign(size, 0.0);
        e.m.assign(size, 0.0);
        e.v.assign(size, 0.0);
        entries.push_back(std::move(e));
    }

    void zero_grads() {
        for (auto& e : entries) std::fill(e.grad.begin(), e.grad.end(), 0.0);
    }

    ParamEntry* find(const std::string& name) {
        for (auto& e : entries)
            if (e.name == name) return &e;
        return nullptr;
    }

    std::vector<double> snapshot() const {
        std::vector<double> out;
        for (const auto& e : entries) out.insert(out.end(), e.data, e.data + e.size);
        return out;
    }

    void restore(const std::vector<double>& snap) {
        size_t off = 0;
        for (auto& e : entries) {
            if (off + e.size > snap.size()) throw Error("param snapshot size mismatch");
            std::copy(snap.begin() + off, snap.begin() + off + e.size, e.data);
            off += e.size;
        }
        if (off != snap.size()) throw Error("param snapshot size mismatch");
    }

    size_t total_size() const {
        size_t n = 0;
        for (const auto& e : entries) n += e.size;
        return n;
    }
};

struct AdamConfig {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0; // decoupled
};

// One update over all entries using the gradients stored in the group.
void adam_step(ParamGroup& params, const AdamConfig& cfg);

} // namespace lsiq
