#pragma once

#include <cstdint>
#include <string>

namespace sttn::synth {

// Deterministic procedurally-rendered digit corpus in MNIST IDX format
// (28x28 grayscale, stroke glyphs under random affine distortion, blur and
// pixel noise). Used by tests and as the offline stand-in when the real
// dataset files are not present.
void write_digit_corpus_idx(const std::string& dir, int train_count, int test_count, uint64_t seed);

// Deterministic colored-shape corpus in the CIFAR-10 binary layout
// (data_batch_1..5.bin + test_batch.bin, 3073-byte records).
void write_shape_corpus_cifar(const std::string& dir, int train_count, int test_count, uint64_t seed);

}  // namespace sttn::synth
