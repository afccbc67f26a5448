// Copyright 2026 The dschat Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <random>

#include "dsc/error.hpp"
#include "dsc/perf.hpp"

using namespace dsc;
using namespace dsc::perf;

TEST_CASE("phase flops") {
  WorkloadSpec w;
  w.actor_params = 1.3e9;
  CHECK(flops_phase(w, Phase::Gen) == doctest::Approx(1.3312e12).epsilon(1e-12));
  const double train = flops_phase(w, Phase::Train);
  CHECK(train == doctest::Approx((6 + 2) * 1.3e9 * 512 + 8 * 350e6 * 512));

  WorkloadSpec d = w;
  d.actor_params *= 2;
  d.small_params *= 2;
  CHECK(flops_phase(d, Phase::Gen) == doctest::Approx(2 * flops_phase(w, Phase::Gen)));
  CHECK(flops_phase(d, Phase::Train) == doctest::Approx(2 * train));

  WorkloadSpec big;
  big.small_params = 0;
  CHECK(gen_flop_fraction(big) == doctest::Approx(0.2).epsilon(1e-12));
  for (const auto& name : workload_preset_names()) {
    const auto p = workload_preset(name);
    if (p.actor_params < 10 * p.small_params) continue;  // N >> M only
    CHECK(std::abs(gen_flop_fraction(p) - 0.2) <= 0.03);
  }
}

TEST_CASE("phase time regimes") {
  const auto hw = hardware_preset("A100-40GB");
  auto w = workload_preset("opt-1.3b");
  // batch 1: decoding reads the weights once per token
  const double t1 = phase_time(w, hw, 1, Phase::Gen, 1, 1);
  const double bw = w.gen_len * 2 * w.actor_params / (hw.bandwidth * hw.gen_efficiency);
  CHECK(t1 == doctest::Approx(bw).epsilon(0.02));
  // tp halves the bandwidth-bound part
  const double t2 = phase_time(w, hw, 1, Phase::Gen, 2, 2);
  CHECK((t2 - (t1 - bw)) == doctest::Approx(bw / 2).epsilon(1e-9));
  // huge batch: compute bound, time proportional to flops
  const double a = phase_time(w, hw, 1e5, Phase::Gen, 8, 1);
  const double b = phase_time(w, hw, 2e5, Phase::Gen, 8, 1);
  CHECK(b == doctest::Approx(2 * a).epsilon(1e-9));
  CHECK(phase_time(w, hw, 10, Phase::Train, 8, 1) ==
        doctest::Approx(flops_phase(w, Phase::Train) * 10 / (hw.peak_flops * hw.train_mfu)));
  CHECK_THROWS_AS(phase_time(w, hw, 0, Phase::Gen, 1, 1), ContractError);
}

TEST_CASE("effective throughput is the weighted harmonic mean") {
  const double same[] = {0.5, 0.5}, x[] = {7.0, 7.0};
  CHECK(harmonic_throughput(same, x) == doctest::Approx(7.0));
  const double f[] = {0.2, 0.8}, t[] = {10.0, 40.0};
  CHECK(harmonic_throughput(f, t) == doctest::Approx(25.0).epsilon(1e-12));

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.1, 10.0);
  for (int k = 0; k < 200; ++k) {
    const double gf = u(rng) * 1e15, tf = u(rng) * 1e15, gs = u(rng), ts = u(rng);
    const int gpus = 1 + static_cast<int>(rng() % 64);
    const double eff = effective_throughput(gf, gs, tf, ts, gpus);
    const double fr[] = {gf / (gf + tf), tf / (gf + tf)};
    const double th[] = {gf / gs / gpus, tf / ts / gpus};
    CHECK(eff == doctest::Approx(harmonic_throughput(fr, th)).epsilon(1e-10));
    CHECK(eff >= std::min(th[0], th[1]) * (1 - 1e-12));
    CHECK(eff <= std::max(th[0], th[1]) * (1 + 1e-12));
  }
  for (const auto& name : workload_preset_names()) {
    const auto r = evaluate(workload_preset(name), hardware_preset("A100-80GB"), 64);
    if (!r.feasible) continue;
    CHECK(r.effective_tflops >= std::min(r.gen_tflops, r.train_tflops) * (1 - 1e-12));
    CHECK(r.effective_tflops <= std::max(r.gen_tflops, r.train_tflops) * (1 + 1e-12));
  }
}

TEST_CASE("max batch per GPU") {
  WorkloadSpec w;
  w.per_sample_bytes = 0.5e9;
  const auto hw = hardware_preset("A100-40GB");
  CHECK(state_bytes(13e9, 8) == doctest::Approx(26e9));
  CHECK(max_batch_per_gpu(w, hw, 8) == 28);
  // when states dominate memory, doubling W more than doubles b
  CHECK(max_batch_per_gpu(w, hw, 6) == 10);
  CHECK(max_batch_per_gpu(w, hw, 12) > 2 * 10);
  CHECK(max_batch_per_gpu(w, hw, 16) > 28);

  WorkloadSpec tiny = workload_preset("opt-1.3b");
  for (int W : {1, 2, 4, 8, 16, 32, 64}) {
    CHECK(max_batch_per_gpu(tiny, hardware_preset("A100-80GB"), W) == std::min(1024 / W, 
          max_batch_per_gpu(tiny, hardware_preset("A100-80GB"), W)));
  }
  CHECK(max_batch_per_gpu(tiny, hardware_preset("A100-80GB"), 64) == 16);

  WorkloadSpec huge = workload_preset("opt-66b");
  CHECK_THROWS_AS(max_batch_per_gpu(huge, hw, 8), InfeasibleError);
  MemoryOptions off;
  off.offload = true;
  CHECK(state_bytes(66e9, 8, off) == doctest::Approx(4 * 66e9 / 8));
  MemoryOptions lora;
  lora.lora = true;
  CHECK(state_bytes(10e9, 1, lora) == doctest::Approx((2 + 14 * 0.01) * 10e9));
}

TEST_CASE("scaling curve knee") {
  const auto curve =
      scaling_curve(workload_preset("opt-13b"), hardware_preset("A100-40GB"), {8, 16, 32, 64});
  REQUIRE(curve.points.size() == 4);
  CHECK(curve.knees == 1);
  REQUIRE(curve.knee.has_value());
  CHECK(*curve.knee == 16);
  const auto& p = curve.points;
  CHECK(p[1].effective_tflops * 16 / (p[0].effective_tflops * 8) > 2.0);
  CHECK(p[2].effective_tflops <= p[1].effective_tflops);
  CHECK(p[3].effective_tflops <= p[2].effective_tflops);

  // never memory-bound: no super-linear segment at all
  const auto flat =
      scaling_curve(workload_preset("opt-1.3b"), hardware_preset("A100-80GB"), {8, 16, 32, 64});
  CHECK(flat.knees == 0);
  for (std::size_t i = 0; i + 1 < flat.points.size(); ++i) {
    CHECK(flat.points[i + 1].effective_tflops <= flat.points[i].effective_tflops);
  }
  CHECK_THROWS_AS(scaling_curve(workload_preset("opt-13b"), hardware_preset("A100-40GB"), {16, 8}),
                  ContractError);
}

TEST_CASE("cost arithmetic") {
  const auto t1 = cost_for_hours(9, 8, 4.0);
  CHECK(t1.dollars == doctest::Approx(288));
  CHECK(std::abs(t1.dollars - 290) / 290 < 0.01);
  CHECK(cost_for_hours(1.25, 64, 4.0).dollars == doctest::Approx(320));

  auto w = workload_preset("opt-13b");
  auto hw = hardware_preset("A100-80GB");
  const auto base = estimate_cost(w, hw, 8);
  hw.peak_flops /= 2;
  hw.bandwidth /= 2;
  const auto slow = estimate_cost(w, hw, 8);
  CHECK(slow.dollars == doctest::Approx(2 * base.dollars).epsilon(1e-9));
  CHECK(base.dollars == doctest::Approx(base.hours * 8 * 4.0));
}

TEST_CASE("single GPU feasibility table") {
  CHECK(feasible_single_gpu(13e9, 80e9));
  CHECK_FALSE(feasible_single_gpu(30e9, 80e9));
  CHECK_FALSE(feasible_single_gpu(6.7e9, 32e9));
  CHECK(feasible_single_gpu(2.7e9, 32e9));
  CHECK(max_feasible_model(32e9) == "opt-2.7b");
  CHECK(max_feasible_model(48e9) == "opt-6.7b");
  CHECK(max_feasible_model(40e9) == "opt-6.7b");
  CHECK(max_feasible_model(80e9) == "opt-13b");
  // monotone in memory
  bool was = false;
  for (double mem = 1e9; mem <= 200e9; mem += 1e9) {
    const bool now = feasible_single_gpu(13e9, mem);
    CHECK((!was || now));
    was = now;
  }
}

TEST_CASE("modeled MFU beats a low-utilization baseline") {
  const auto hw = hardware_preset("A100-40GB");
  const auto r = evaluate(workload_preset("opt-1.3b"), hw, 8);
  CHECK(r.mfu(hw) >= 10 * 0.005);
}

TEST_CASE("csv and svg") {
  const auto curve =
      scaling_curve(workload_preset("opt-13b"), hardware_preset("A100-40GB"), {8, 16});
  const auto csv = reports_csv(curve.points);
  CHECK(csv.rfind("model,N,gpus,tp,phase,seconds,tflops_per_gpu,hours,dollars,feasible\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);
  const auto svg = scaling_svg(curve, "opt-13b");
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("effective") != std::string::npos);
  CHECK(svg.find("</svg>") != std::string::npos);
}

TEST_CASE("presets and validation") {
  CHECK_THROWS_AS(hardware_preset("H9000"), ConfigError);
  CHECK_THROWS_AS(workload_preset("opt-9b"), ConfigError);
  CHECK(workload_preset("facebook/opt-13b").actor_params == 13e9);
  HardwareSpec h;
  h.train_mfu = 1.5;
  CHECK_THROWS_AS(h.validate(), ConfigError);
  WorkloadSpec w;
  w.gen_len = 0;
  CHECK_THROWS_AS(w.validate(), ConfigError);
}
