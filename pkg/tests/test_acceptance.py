"""Acceptance gate: one test per criterion, one [PASS]/[FAIL] line each.

Run with `pytest tests/test_acceptance.py -s -q`.  The shared `ablation`
fixture performs the real experiment once (200 narration streams of 600
frames, three seed-matched training runs, held-out evaluation); everything
else is fast.  Tolerances are asserted exactly as stated, no calibration.
"""

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np
import pytest

from streamlm import assembly as A
from streamlm import data as D
from streamlm import metrics as MT
from streamlm import model as M
from streamlm import tensor as T
from streamlm import training as TR
from streamlm import vocab as V
from streamlm.cli import main as cli

import fakes
import oracles


def report(name: str, ok: bool, detail: str = ""):
    tail = f"  ({detail})" if detail else ""
    print(f"\n[{'PASS' if ok else 'FAIL'}] {name}{tail}", flush=True)
    assert ok, f"{name}{tail}"


# ---------------------------------------------------------------------------
# criterion 1: gradient correctness
# ---------------------------------------------------------------------------


def test_c01_gradient_correctness(voc):
    t0 = time.time()
    with T.precision("f64"):
        cfg = M.ModelConfig(vocab_size=len(voc), d_model=32, n_layers=2,
                            n_heads=4, max_context=8, tokens_per_frame=1,
                            frame_feature_dim=8, proj_hidden=8, mlp_hidden=64)
        params = M.init_model(cfg, seed=3, dtype=np.float64)
        rng = np.random.default_rng(3)
        ids = np.array([V.USER, 9, V.FRAME, V.FRAME, V.ASSISTANT, 10,
                        V.EOS, V.FRAME], dtype=np.int32)
        cols = np.array([2, 3, 7])
        feats = rng.normal(size=(3, 8))
        batch = M.pack_single(ids, feats, cols)
        # both loss terms active: response tokens and silence slots
        lm_w = np.array([0, 0, 0, 1, 1, 1, 0, 0], dtype=float) / 4
        si_w = np.array([0, 0, 1, 0, 0, 0, 0, 1], dtype=float) / 4
        targets = np.array([9, V.FRAME, V.FRAME, V.ASSISTANT, 10, V.EOS,
                            V.FRAME, 0])
        seos = np.full(8, voc.stream_eos_id)

        def loss_fn():
            logits = M.forward_full(params, batch)
            flat = T.reshape(logits, (8, len(voc)))
            lm = T.cross_entropy(flat, targets, lm_w)
            si = T.cross_entropy(flat, seos, si_w)
            return T.add(lm, si)

        err = T.grad_check(loss_fn, params.tensors, eps=1e-5)
    dt = time.time() - t0
    report("criterion 1: gradient correctness",
           err < 1e-4 and dt < 60,
           f"max rel err {err:.2e} < 1e-4 over {params.count()} params, {dt:.1f}s")


# ---------------------------------------------------------------------------
# criterion 2: cache equivalence
# ---------------------------------------------------------------------------


def test_c02_cache_equivalence(voc):
    t0 = time.time()
    with T.precision("f64"):
        cfg = M.ModelConfig(vocab_size=len(voc), d_model=64, n_layers=2,
                            n_heads=2, max_context=256, tokens_per_frame=2,
                            frame_feature_dim=8, proj_hidden=16)
        params = M.init_model(cfg, seed=1, dtype=np.float64)
        worst = 0.0
        for trial in range(100):
            rng = np.random.default_rng(1000 + trial)
            ids, cols, feats = [], [], []
            budget = int(rng.integers(32, 257))
            while len(ids) < budget - 2:
                if rng.random() < 0.4:
                    cols.append(len(ids))
                    ids.extend([V.FRAME] * 2)
                    feats.append(rng.normal(size=8))
                else:
                    ids.append(int(rng.integers(6, len(voc))))
            ids = np.asarray(ids, dtype=np.int32)
            cols = np.asarray(cols)
            feats = np.asarray(feats) if feats else np.zeros((0, 8))
            full = M.forward_full(params, M.pack_single(ids, feats, cols)).data[0]
            cache = M.KVCache(cfg, dtype=np.float64)
            got, start = [], 0
            while start < len(ids):
                end = min(start + int(rng.integers(1, 9)), len(ids))
                while any(c < end < c + 2 for c in cols):
                    end += 1
                sel = (cols >= start) & (cols < end)
                got.append(M.forward_step(params, cache, ids[start:end],
                                          feats[sel], cols[sel] - start))
                start = end
            diff = float(np.abs(np.concatenate(got) - full).max())
            worst = max(worst, diff)
    dt = time.time() - t0
    report("criterion 2: cache equivalence",
           worst < 1e-5 and dt < 120,
           f"100 mixed sequences, max |logit diff| {worst:.2e} < 1e-5, {dt:.1f}s")


# ---------------------------------------------------------------------------
# criterion 3: mask exactness
# ---------------------------------------------------------------------------


def test_c03_mask_exactness(voc):
    n_checked = 0
    ok = True
    for i in range(1000):
        seed = 5000 + i
        wc = D.WorldConfig(num_frames=24 + (i % 5) * 8, seg_min=3, seg_max=7,
                           gap_prob=0.3, gap_min=1, gap_max=2, max_tasks=2)
        w = D.gen_world(wc, seed)
        if i % 2:
            sample = D.make_narration_stream(w)
        else:
            sample = D.insert_queries(
                w, D.synthesize_dialogue(w, D.TEMPLATES, seed), 3, seed)
        scheme = A.SCHEMES[i % 3]
        p = 1 + (i % 3)
        seq = A.assemble(sample, voc, p, scheme)
        mask = A.compute_masks(seq)
        lm_want, si_want = oracles.scan_masks(sample, voc, p, scheme)
        same = (np.array_equal(mask.lm, lm_want)
                and np.array_equal(mask.silence, si_want))
        # the condition: silence => frame-last position and no LM loss there
        cond = np.all(seq.frame_last[mask.silence]) and not np.any(
            mask.silence & mask.lm)
        ok = ok and same and cond
        n_checked += 1
    report("criterion 3: mask exactness", ok and n_checked == 1000,
           f"{n_checked} samples agree with the event-list scanner")


# ---------------------------------------------------------------------------
# criteria 4, 5, 7 share one real experiment
# ---------------------------------------------------------------------------


@dataclass
class Ablation:
    voc: object
    train_ds: object
    val_ds: object
    checkpoints: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)
    theta_sweep: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    untrained_report: object = None
    train_seconds: float = 0.0
    total_seconds: float = 0.0


MODEL_CFG = dict(d_model=128, n_layers=2, n_heads=1, max_context=8192,
                 tokens_per_frame=1, frame_feature_dim=16, proj_hidden=128,
                 attn_block=512)
TRAIN_CFG = dict(stream_loss_weight=1.0, lr=2e-3, epochs=2, batch_size=1, seed=0)
N_TRAIN, N_VAL = 200, 20
THETA = 0.6


@pytest.fixture(scope="session")
def ablation(voc):
    t_start = time.time()
    wc = D.WorldConfig()
    samples, keys = D.build_samples(
        D.DataConfig(world=wc, n_samples=N_TRAIN + N_VAL, val_fraction=0.0,
                     seed=17))
    train_ds = D.LoadedDataset(samples[:N_TRAIN], keys[:N_TRAIN],
                               wc.feature_dim, wc.noise_sigma, wc.fps)
    val_ds = D.LoadedDataset(samples[N_TRAIN:], keys[N_TRAIN:],
                             wc.feature_dim, wc.noise_sigma, wc.fps)
    ab = Ablation(voc=voc, train_ds=train_ds, val_ds=val_ds)
    cfg = M.ModelConfig(vocab_size=len(voc), **MODEL_CFG)
    t_train = time.time()
    for scheme in A.SCHEMES:
        params = M.init_model(cfg, seed=TRAIN_CFG["seed"])
        TR.train(train_ds, params, voc, TR.TrainConfig(scheme=scheme, **TRAIN_CFG))
        ab.checkpoints[scheme] = params
        print(f"  [ablation] trained {scheme} "
              f"({time.time() - t_train:.0f}s elapsed)", flush=True)
    ab.train_seconds = time.time() - t_train
    for scheme, params in ab.checkpoints.items():
        ab.reports[scheme] = MT.evaluate_dataset(params, voc, val_ds, scheme, THETA)
        ab.counts[scheme] = MT.mean_train_tokens(train_ds, voc,
                                                 cfg.tokens_per_frame, scheme)
    ab.untrained_report = MT.evaluate_dataset(
        M.init_model(cfg, seed=TRAIN_CFG["seed"]), voc, val_ds, "streaming", THETA)
    # TimeDiff-only sweep (scans, no teacher forcing) on part of the val set
    params = ab.checkpoints["streaming"]
    for theta in (0.0, 0.5, 0.6, 0.7, 0.8):
        tds = []
        for i in range(8):
            tds.extend(MT.scan_sample(params, voc, val_ds.samples[i],
                                      val_ds.features_for(i), "streaming",
                                      theta).time_diffs)
        ab.theta_sweep[theta] = float(np.mean(tds))
    ab.total_seconds = time.time() - t_start
    return ab


def test_c04_token_accounting(ablation):
    voc = ablation.voc
    p = 1
    # closed form, computed before assembling the per-frame sequences
    predicted = []
    for s in ablation.train_ds.samples:
        base = len(A.assemble(s, voc, p, "streaming"))
        gold = sum(t.kind == "assistant" for t in s.turns)
        predicted.append(A.per_frame_count_closed_form(
            base, A.silent_frame_count(s), gold))
    closed_form_ratio = float(np.mean(predicted)) / ablation.counts["streaming"]
    equal = ablation.counts["streaming"] == ablation.counts["interleaved"]
    actual_ratio = ablation.counts["per_frame"] / ablation.counts["streaming"]
    closed_form_holds = abs(float(np.mean(predicted)) -
                            ablation.counts["per_frame"]) < 1e-9
    report("criterion 4: token accounting",
           equal and actual_ratio >= 1.5 and closed_form_holds,
           f"streaming == interleaved == {ablation.counts['streaming']:.1f} tok; "
           f"per_frame/streaming = {actual_ratio:.2f} >= 1.5 "
           f"(closed form {closed_form_ratio:.2f})")


def test_c05_learning_signal(ablation):
    r = ablation.reports
    td_s, td_p, td_i = (r["streaming"].time_diff_seconds,
                        r["per_frame"].time_diff_seconds,
                        r["interleaved"].time_diff_seconds)
    flu_s, flu_p = r["streaming"].fluency, r["per_frame"].fluency
    ppl_u, ppl_s = ablation.untrained_report.lm_ppl, r["streaming"].lm_ppl
    ok = (td_s <= td_p < td_i) and (flu_s >= flu_p) and (ppl_u > 5 * ppl_s)
    report("criterion 5: learning signal",
           ok,
           f"TimeDiff s/p/i = {td_s:.2f}/{td_p:.2f}/{td_i:.2f}s; "
           f"Fluency s/p = {flu_s:.3f}/{flu_p:.3f}; "
           f"PPL untrained/streaming = {ppl_u:.1f}/{ppl_s:.2f}; "
           f"train {ablation.train_seconds / 60:.1f} min "
           f"(target horizon 30 min)")


def test_c06_throughput_ordering(voc):
    t0 = time.time()
    sample = D.make_narration_stream(D.gen_world(D.WorldConfig(), 3))
    stats = {scheme: MT.scheme_throughput(sample, voc, scheme, p=10,
                                          decode_ms=30.0, encode_ms=5.0,
                                          fps=2.0)
             for scheme in A.SCHEMES}
    again = {scheme: MT.scheme_throughput(sample, voc, scheme, p=10,
                                          decode_ms=30.0, encode_ms=5.0,
                                          fps=2.0)
             for scheme in A.SCHEMES}
    deterministic = stats == again
    s, p, i = stats["streaming"], stats["per_frame"], stats["interleaved"]
    ok = (s["skips"] == 0 and s["realtime_fps"] == pytest.approx(2.0)
          and p["skips"] > 0
          and s["peak_cache_tokens"] < p["peak_cache_tokens"] < i["peak_cache_tokens"]
          and deterministic)
    dt = time.time() - t0
    report("criterion 6: throughput ordering",
           ok and dt < 60,
           f"skips s/p/i = {s['skips']}/{p['skips']}/{i['skips']}; "
           f"cache {s['peak_cache_tokens']} < {p['peak_cache_tokens']} < "
           f"{i['peak_cache_tokens']}; fps s/p/i = {s['fps']}/{p['fps']}/{i['fps']}; "
           f"{dt:.1f}s")


def test_c07_theta_behavior(ablation):
    voc = ablation.voc
    params = ablation.checkpoints["streaming"]
    # monotonicity on fixed logits: the silent set shrinks as theta rises
    sample = ablation.val_ds.samples[0]
    feats = ablation.val_ds.features_for(0)
    seq = A.assemble(sample, voc, 1, "streaming")
    batch = M.pack_single(seq.token_ids, feats.astype(np.float32), seq.frame_cols)
    logits = M.forward_full(params, batch).data[0]
    frame_rows = logits[seq.frame_last]
    probs = np.exp(frame_rows - frame_rows.max(-1, keepdims=True))
    probs /= probs.sum(-1, keepdims=True)
    grid = [0.5, 0.6, 0.7, 0.8]
    silent_sets = [set(np.where(probs[:, voc.stream_eos_id] >= th)[0])
                   for th in grid]
    monotone = all(silent_sets[i + 1] <= silent_sets[i]
                   for i in range(len(grid) - 1))
    td0 = ablation.theta_sweep[0.0]
    best = min(ablation.theta_sweep[t] for t in grid)
    report("criterion 7: threshold behavior",
           monotone and best < td0,
           f"silent-set monotone over {grid}; best TimeDiff {best:.2f}s < "
           f"no-threshold {td0:.2f}s")


# ---------------------------------------------------------------------------
# criterion 8: metric oracles
# ---------------------------------------------------------------------------


def test_c08_metric_oracles(voc, monkeypatch):
    lib = D.task_library()
    sample = D.StreamSample(
        fps=2.0, num_frames=10, source="narration",
        states=np.zeros(10, dtype=np.int16),
        turns=[D.Turn("user", 0, V.NARRATION_QUERY),
               D.Turn("assistant", 3, lib[0].phrase),
               D.Turn("assistant", 7, lib[1].phrase)])
    feats0 = np.zeros((10, 8))

    # perfect gold player: every metric at its ideal value, by definition
    fakes.install(monkeypatch)
    ideal = True
    for scheme in A.SCHEMES:
        pp = fakes.PerfectParams(sample, voc, scheme)
        ppl, lgs = MT.teacher_forced_eval(pp, voc, sample, feats0, scheme)
        scan = MT.scan_sample(pp, voc, sample, feats0, scheme, THETA)
        ideal = ideal and abs(ppl - 1.0) < 1e-6 and lgs == [1.0, 1.0]
        ideal = ideal and scan.time_diffs == [0.0, 0.0]
        ideal = ideal and scan.fluencies == [1.0, 1.0]
    monkeypatch.undo()

    # uniform model: PPL equals vocabulary size
    cfg = M.ModelConfig(vocab_size=len(voc), d_model=16, n_layers=1, n_heads=2,
                        max_context=512, tokens_per_frame=1,
                        frame_feature_dim=8, proj_hidden=8)
    zp = M.init_model(cfg, seed=0)
    for _, tns in zp.items():
        tns.data[:] = 0.0
    uniform_ppl = MT.lm_ppl(zp, voc, sample, feats0)
    uniform_ok = abs(uniform_ppl - len(voc)) < 1e-6

    # random model vs scalar/brute-force recomputation, all schemes
    params = M.init_model(cfg, seed=8)
    agree = True
    for scheme in A.SCHEMES:
        seq, logits = oracles.full_logits(params, voc, sample, feats0, scheme, 1)
        off = 0 if scheme == "per_frame" else 1
        nlls = [oracles.scalar_nll(logits[j], seq.token_ids[j + 1])
                for _, s, e in seq.turn_spans
                for j in range(s + off - 1, e - 1)]
        want_ppl = float(np.exp(np.mean(nlls)))
        got_ppl, got_lgs = MT.teacher_forced_eval(params, voc, sample, feats0, scheme)
        scan = MT.scan_sample(params, voc, sample, feats0, scheme, THETA)
        sf, td, flu = oracles.brute_force_scan(params, voc, sample, feats0,
                                               scheme, THETA)
        agree = agree and abs(got_ppl - want_ppl) < 1e-6
        agree = agree and scan.speak_frames == sf
        agree = agree and np.allclose(scan.time_diffs, td, atol=1e-9)
        agree = agree and np.allclose(scan.fluencies, flu, atol=1e-6)
    # prefix-ratio definition points
    defs = (MT.correct_prefix_ratio([1, 2, 3, 9, 9], [1, 2, 3, 4, 5]) == 0.6
            and MT.fluency_score([True, True], [True, True, False]) == 0.8)
    report("criterion 8: metric oracles",
           ideal and uniform_ok and agree and defs,
           f"perfect model ideal on all schemes; uniform PPL {uniform_ppl:.4f} "
           f"== |V|; scans match brute force")


# ---------------------------------------------------------------------------
# criterion 9: data-generation contract
# ---------------------------------------------------------------------------


def test_c09_data_contract():
    ok = True
    for i in range(1000):
        seed = 9000 + i
        wc = D.WorldConfig(num_frames=40 + (i % 4) * 10, seg_min=3, seg_max=8,
                           gap_prob=0.3, gap_min=1, gap_max=2, max_tasks=3)
        w = D.gen_world(wc, seed)
        crits = D.critical_timestamps(w)
        synth = D.synthesize_dialogue(w, D.TEMPLATES, seed)
        # before filtering: one response per critical timestamp
        ok = ok and all([ts for ts, _ in q.responses] == crits for q in synth)
        sample = D.insert_queries(w, synth, 3, seed)
        users = sorted(t.frame for t in sample.turns if t.kind == "user")
        scope_end = {u: (users[k + 1] if k + 1 < len(users) else w.num_frames)
                     for k, u in enumerate(users)}
        # walk responses with their owning query
        current = None
        for t in sample.turns:
            if t.kind == "user":
                current = t.frame
            else:
                ok = ok and current is not None
                ok = ok and t.frame >= current          # never precedes its query
                ok = ok and t.frame < scope_end[current]  # never leaks past the next
    report("criterion 9: data-generation contract", ok,
           "1000 dialogue samples: no response precedes its query; scopes "
           "respected; pre-filter responses at every critical timestamp")


# ---------------------------------------------------------------------------
# criterion 10: determinism
# ---------------------------------------------------------------------------


def _sha_all(run_dir, skip=("resolved-config.json",)):
    out = {}
    for f in sorted(run_dir.rglob("*")):
        if f.is_file() and f.name not in skip:
            out[f.name] = hashlib.sha256(f.read_bytes()).hexdigest()
    return out


def test_c10_determinism(tmp_path):
    data_cfg = {"world": {"num_frames": 36, "seg_min": 4, "seg_max": 8,
                          "gap_prob": 0.3, "gap_min": 1, "gap_max": 2,
                          "max_tasks": 2},
                "n_samples": 10, "val_fraction": 0.2,
                "dialogue_fraction": 0.3, "seed": 5}
    train_cfg = {"model": {"d_model": 24, "n_layers": 1, "n_heads": 2,
                           "max_context": 768, "tokens_per_frame": 1,
                           "frame_feature_dim": 16, "proj_hidden": 16},
                 "train": {"scheme": "streaming", "epochs": 1,
                           "batch_size": 4, "lr": 0.001, "seed": 0}}
    (tmp_path / "d.json").write_text(json.dumps(data_cfg))
    (tmp_path / "t.json").write_text(json.dumps(train_cfg))
    sums = {"gen-data": [], "train": [], "eval": [], "bench": []}
    for run in ("a", "b"):
        base = tmp_path / run
        assert cli(["gen-data", "--config", str(tmp_path / "d.json"),
                    "--run-dir", str(base / "data")]) == 0
        sums["gen-data"].append(_sha_all(base / "data"))
        ckpts = []
        for scheme in A.SCHEMES:
            rc = cli(["train", "--config", str(tmp_path / "t.json"),
                      "--data", str(base / "data"), "--scheme", scheme,
                      "--run-dir", str(base / f"tr-{scheme}")])
            assert rc == 0
            ckpts.append(f"{scheme}={base / f'tr-{scheme}' / 'model.ckpt'}")
            if scheme == "streaming":
                sums["train"].append(_sha_all(base / "tr-streaming"))
        assert cli(["eval", "--checkpoint",
                    str(base / "tr-streaming" / "model.ckpt"),
                    "--data", str(base / "data"),
                    "--run-dir", str(base / "ev")]) == 0
        sums["eval"].append(_sha_all(base / "ev"))
        rc = cli(["bench", "--data", str(base / "data"),
                  "--checkpoints", ",".join(ckpts),
                  "--run-dir", str(base / "bench")])
        assert rc in (0, 3)
        sums["bench"].append(_sha_all(base / "bench"))
    same = {k: v[0] == v[1] for k, v in sums.items()}
    report("criterion 10: determinism", all(same.values()),
           "byte-identical artifacts across two seeded runs: "
           + ", ".join(k for k in same))
