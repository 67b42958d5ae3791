"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 4-7 train a toy backbone and 18 adapters. Artifacts are cached under
``$NEXUS_ARTIFACTS`` (default ``<repo>/artifacts``), keyed by configuration and
source hash, so only the first run pays the training cost (about 2.5 h on one
CPU core with the torch conv kernel).
"""

import os
import statistics
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from nexus import gradcheck
from nexus import tensor as T
from nexus.adapter import Adapter
from nexus.complexity import analyze, grouped_share, preset, report_for, t2i_reference_count
from nexus.diffusion import (Denoiser, DiffusionSchedule, ddpm_loss, p_sample_loop, q_sample)
from nexus.experiments import AdapterRun, Pipeline, ToySetup
from nexus.tensor import Tensor
from nexus.unet import UNet

# ---------------------------------------------------------------- pinned tolerances

TOL = {
    # 1 gradient suite
    "grad_primitive_rel": 1e-4,
    "grad_end2end_rel": 1e-3,
    "grad_min_params": 20,
    "grad_seconds": 120.0,
    # 2 complexity audit
    "params_rel": 0.15,
    "gflops_rel": 0.20,
    "slope_rel": 0.15,
    "paper_law_rel": 1e-3,
    "prime_minus_t2i_m": (7.0, 10.0),
    "t2i_minus_slim_m": (16.0, 20.0),
    "complexity_seconds": 1.0,
    # 3 fusion identity
    "fusion_seconds": 10.0,
    # 4 toy conditional generation
    "edge_f1_adapter_min": 0.6,
    "edge_f1_uncond_max": 0.3,
    "color_prompt_min": 0.8,
    "color_scrambled_band": 0.1,  # around chance 0.25
    "pretrain_steps_max": 20_000,
    "adapter_steps_max": 10_000,
    # 5 P2A ablation
    "p2a_color_drop_min": 0.1,
    "p2a_edge_gain_max": 0.05,
    # 8 diffusion math
    "moment_rel": 0.02,
}
PAPER = {"prime_params": 85.82, "slim_params": 59.29, "t2i_params": 77.37,
         "prime_gflops": 33.32, "slim_gflops": 23.77, "slim_g4": 42.23, "slim_g8": 33.71}
SEEDS = (0, 1, 2)
EVAL = dict(n=200, guidance=7.5, steps=35, seed=0)


def verdict(num: int, name: str, ok: bool, detail: str) -> None:
    print(f"\nCRITERION {num} [{'PASS' if ok else 'FAIL'}] {name}: {detail}")


# ---------------------------------------------------------------- criterion 1

def test_criterion_1_gradient_suite():
    t0 = time.time()
    results = gradcheck.run(("primitives", "blocks", "end2end"))
    secs = time.time() - t0
    prim = [r for r in results if not r.name.startswith("end2end")]
    e2e = [r for r in results if r.name.startswith("end2end")]
    worst_p = max(r.rel_err for r in prim)
    worst_e = max(r.rel_err for r in e2e)
    ok = (worst_p < TOL["grad_primitive_rel"] and all(r.tol <= TOL["grad_primitive_rel"] for r in prim)
          and worst_e < TOL["grad_end2end_rel"] and all(r.checked >= TOL["grad_min_params"] for r in e2e)
          and any("prime" in r.name for r in prim) and any("slim" in r.name for r in prim)
          and secs < TOL["grad_seconds"])
    verdict(1, "gradient suite", ok, f"{len(results)} checks, worst primitive/block {worst_p:.1e}, "
                                     f"worst end-to-end {worst_e:.1e}, {secs:.1f}s")
    assert ok


# ---------------------------------------------------------------- criterion 2

def _rel(a, b):
    return abs(a / b - 1)


def test_criterion_2_complexity_audit():
    t0 = time.time()
    prime, slim = report_for("prime-full"), report_for("slim-full")
    t2i = t2i_reference_count()
    slim_cfg = preset("slim-full")
    by_g = {g: analyze(replace(slim_cfg, groups=g)).total_params for g in (1, 2, 4, 8)}
    B = grouped_share(slim_cfg)
    law_exact = all(by_g[g] == by_g[1] - B + B // g for g in (2, 4, 8))
    paper_B = (PAPER["slim_params"] - PAPER["slim_g4"]) / (1 / 2 - 1 / 4)
    paper_A = PAPER["slim_params"] - paper_B / 2
    paper_law = _rel(paper_A + paper_B / 8, PAPER["slim_g8"])
    d1, d2 = prime.params_m - t2i.params_m, t2i.params_m - slim.params_m
    secs = time.time() - t0
    checks = {
        "prime params": _rel(prime.params_m, PAPER["prime_params"]) <= TOL["params_rel"],
        "slim params": _rel(slim.params_m, PAPER["slim_params"]) <= TOL["params_rel"],
        "prime gflops": _rel(prime.gflops, PAPER["prime_gflops"]) <= TOL["gflops_rel"],
        "slim gflops": _rel(slim.gflops, PAPER["slim_gflops"]) <= TOL["gflops_rel"],
        "A+B/G form": law_exact,
        "B": _rel(B / 1e6, paper_B) <= TOL["slope_rel"],
        "paper law": paper_law < TOL["paper_law_rel"],
        "prime-t2i": TOL["prime_minus_t2i_m"][0] <= d1 <= TOL["prime_minus_t2i_m"][1],
        "t2i-slim": TOL["t2i_minus_slim_m"][0] <= d2 <= TOL["t2i_minus_slim_m"][1],
        "runtime": secs < TOL["complexity_seconds"],
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    verdict(2, "complexity audit", ok,
            f"prime {prime.params_m:.2f}M/{prime.gflops:.2f}G, slim {slim.params_m:.2f}M/{slim.gflops:.2f}G, "
            f"B {B / 1e6:.2f}M vs {paper_B:.2f}M, paper G=8 law err {paper_law:.2%}, "
            f"prime-t2i {d1:.2f}M, t2i-slim {d2:.2f}M, {secs:.2f}s" + (f"; failed {failed}" if failed else ""))
    assert ok


# ---------------------------------------------------------------- criterion 3

def test_criterion_3_fusion_identity():
    t0 = time.time()
    setup = ToySetup()
    unet = UNet(setup.unet, seed=0)
    rng = np.random.default_rng(0)
    for p in unet.parameters():  # non-trivial backbone: undo the zero-initialised layers
        p.data = rng.standard_normal(p.shape) * 0.1
    adapter = Adapter(setup.adapter_config("prime"), rng=0)
    for block in adapter.blocks:
        for p in block.conv1b.parameters():
            p.data[:] = 0
    x = Tensor(rng.standard_normal((2, 3, 32, 32)))
    cond = Tensor(rng.uniform(-1, 1, (2, 3, 32, 32)))
    text = rng.standard_normal((2, 16, setup.unet.text_dim))
    E = adapter(cond, text)
    zero_out = all(not np.any(e.data) for e in E)
    with_adapter = Denoiser(unet, adapter)(x, np.array([10, 900]), text, cond).data
    bare = unet(x, np.array([10, 900]), text).data
    secs = time.time() - t0
    ok = zero_out and np.array_equal(with_adapter, bare) and np.any(bare) and secs < TOL["fusion_seconds"]
    verdict(3, "fusion identity", ok, f"zero adapter output {zero_out}, bit-identical "
                                      f"{np.array_equal(with_adapter, bare)}, {secs:.2f}s")
    assert ok


# ---------------------------------------------------------------- criteria 4-7 (toy training)

@pytest.fixture(scope="module")
def pipe():
    root = Path(os.environ.get("NEXUS_ARTIFACTS", Path(__file__).resolve().parents[1] / "artifacts"))
    return Pipeline(ToySetup(), root=root, log=lambda m: print(m, flush=True))


def _run(**kw) -> AdapterRun:
    seed = kw.pop("seed", 0)
    run = AdapterRun(**kw)
    run.train.seed = seed
    return run


def _eval(pipe, run):
    return pipe.evaluate(run, **EVAL)


def test_criterion_4_toy_conditional_generation(pipe):
    s = pipe.setup
    assert s.pretrain.steps <= TOL["pretrain_steps_max"] and s.n_train == 5000 and s.size == 32
    run = _run(variant="prime", seed=0)
    assert run.train.steps <= TOL["adapter_steps_max"] and s.kind == "edge"
    with_adapter = _eval(pipe, run)
    uncond = pipe.evaluate(None, **EVAL)
    scrambled = with_adapter.extra["color_accuracy_scrambled"]
    checks = {
        "edge_f1 adapter": with_adapter.edge_f1 >= TOL["edge_f1_adapter_min"],
        "edge_f1 uncond": uncond.edge_f1 <= TOL["edge_f1_uncond_max"],
        "color prompt": with_adapter.color_accuracy >= TOL["color_prompt_min"],
        "color scrambled": abs(scrambled - 0.25) <= TOL["color_scrambled_band"],
    }
    ok = all(checks.values())
    verdict(4, "toy conditional generation", ok,
            f"edge_f1 adapter {with_adapter.edge_f1:.3f} (>= {TOL['edge_f1_adapter_min']}), "
            f"uncond {uncond.edge_f1:.3f} (<= {TOL['edge_f1_uncond_max']}), "
            f"color prompt {with_adapter.color_accuracy:.3f} (>= {TOL['color_prompt_min']}), "
            f"scrambled {scrambled:.3f}, n={with_adapter.n}")
    assert ok


def test_criterion_5_prompt_to_adapter_ablation(pipe):
    on = [_eval(pipe, _run(variant="prime", seed=s)) for s in SEEDS]
    off = [_eval(pipe, _run(variant="prime", prompt_to_adapter=False, seed=s)) for s in SEEDS]
    col_drop = np.mean([a.color_accuracy for a in on]) - np.mean([b.color_accuracy for b in off])
    edge_gain = np.mean([b.edge_f1 for b in off]) - np.mean([a.edge_f1 for a in on])
    ok = col_drop >= TOL["p2a_color_drop_min"] and edge_gain <= TOL["p2a_edge_gain_max"]
    verdict(5, "prompt-to-adapter ablation", ok,
            f"color on {[round(a.color_accuracy, 3) for a in on]} off {[round(b.color_accuracy, 3) for b in off]} "
            f"drop {col_drop:.3f} (>= {TOL['p2a_color_drop_min']}); edge gain {edge_gain:+.3f} "
            f"(<= {TOL['p2a_edge_gain_max']})")
    assert ok


def test_criterion_6_group_ablation(pipe):
    g2 = [_eval(pipe, _run(variant="slim", groups=2, seed=s)).edge_f1 for s in SEEDS]
    g8 = [_eval(pipe, _run(variant="slim", groups=8, seed=s)).edge_f1 for s in SEEDS]
    m2, m8 = statistics.median(g2), statistics.median(g8)
    ok = m8 < m2
    verdict(6, "group ablation", ok, f"slim G=2 edge_f1 {[round(v, 3) for v in g2]} median {m2:.3f}; "
                                     f"G=8 {[round(v, 3) for v in g8]} median {m8:.3f}")
    assert ok


def test_criterion_7_block_count_ablation(pipe):
    med = {}
    vals = {}
    for k in (2, 3, 4):
        vals[k] = [_eval(pipe, _run(variant="prime", stages=k, seed=s)).edge_f1 for s in SEEDS]
        med[k] = statistics.median(vals[k])
    ok = med[4] >= med[3] >= med[2] and med[4] > med[2]
    verdict(7, "block-count ablation", ok,
            "; ".join(f"K={k} {[round(v, 3) for v in vals[k]]} median {med[k]:.3f}" for k in (2, 3, 4)))
    assert ok


# ---------------------------------------------------------------- criterion 8

def test_criterion_8_diffusion_math():
    sched = DiffusionSchedule(1000)
    rng = np.random.default_rng(0)
    t = 300
    x0 = np.full(10_000, 2.0)
    xt = q_sample(sched, x0, t, rng.standard_normal(x0.shape))
    ab = sched.alpha_bar[t]
    mean_err = _rel(xt.mean(), np.sqrt(ab) * 2.0)
    var_err = _rel(xt.var(), 1 - ab)
    moments = mean_err < TOL["moment_rel"] and var_err < TOL["moment_rel"]

    noise = rng.standard_normal((8, 3, 8, 8))
    oracle = ddpm_loss(lambda x_t, tt, text, cond: Tensor(noise), rng.standard_normal(noise.shape),
                       np.zeros((2, 4)), noise=noise, rng=rng).item()

    setup = ToySetup()
    setup.unet.base, setup.unet.time_dim = 4, 8
    unet = UNet(setup.unet, seed=0)
    prng = np.random.default_rng(1)
    for p in unet.parameters():
        p.data = prng.standard_normal(p.shape) * 0.1
    adapter = Adapter(replace(setup.adapter_config("prime"), zero_init_attn_out=False), rng=0)
    model = Denoiser(unet, adapter, null_text=np.zeros((16, setup.unet.text_dim)))
    cond = prng.uniform(-1, 1, (1, 3, 32, 32))
    text = prng.standard_normal((1, 16, setup.unet.text_dim))
    cfg_exact = True
    for s, key in ((1.0, "eps_cond"), (0.0, "eps_uncond")):
        trace = []
        p_sample_loop(model, cond, text, steps=4, guidance=s, trace=trace)
        cfg_exact &= all(np.array_equal(e["eps"], e[key]) for e in trace)
    a = p_sample_loop(model, cond, text, steps=4, seed=11)
    b = p_sample_loop(model, cond, text, steps=4, seed=11)
    deterministic = np.array_equal(a, b)
    ok = moments and oracle == 0.0 and cfg_exact and deterministic
    verdict(8, "diffusion math", ok, f"moment errors mean {mean_err:.2%} var {var_err:.2%}, oracle loss "
                                     f"{oracle}, CFG endpoints exact {cfg_exact}, resample bit-exact {deterministic}")
    assert ok
