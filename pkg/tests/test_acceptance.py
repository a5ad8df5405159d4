"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

    pytest tests/test_acceptance.py -v
"""

import hashlib
import math
import time

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES

from pome.checkpoint import TensorRecord, from_working, read_checkpoint, to_working, write_checkpoint
from pome.cli import main
from pome.core import (
    PomeParams,
    RmsBudget,
    optimal_p_star,
    orthogonalize,
    rms_to_rms_norm,
    verify_theorem_bound,
)
from pome.linalg import frobenius_norm, newton_schulz, spectral_norm, svd
from pome.oracles import gram_singular_values, max_rms_ratio_search
from pome.report import rank_sweep
from pome.selection import EditConfig, select


def report(number, title, ok, detail):
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} | {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def sha(data):
    return hashlib.sha256(data).hexdigest()


def payload_hashes(path):
    c = read_checkpoint(path)
    return {n: sha(c.read_bytes(n)) for n in c.names}


def svd_cases(rng):
    """200 matrices: one 512x512, a few large rectangular ones, the rest up to 64;
    a third rank-deficient and a third with tied spectra."""
    shapes = [(512, 512), (512, 64), (64, 512), (300, 120), (120, 300), (256, 256)]
    while len(shapes) < 200:
        shapes.append((int(rng.integers(1, 65)), int(rng.integers(1, 65))))
    for i, (m, n) in enumerate(shapes):
        r = min(m, n)
        kind = ("gaussian", "rank_deficient", "tied")[i % 3]
        if kind == "rank_deficient" and r > 1:
            rank = int(rng.integers(1, r))
            a = rng.standard_normal((m, rank)) @ rng.standard_normal((rank, n))
        elif kind == "tied":
            qu, _ = np.linalg.qr(rng.standard_normal((m, r)))
            qv, _ = np.linalg.qr(rng.standard_normal((n, r)))
            levels = rng.choice([0.5, 1.0, 3.0], size=r)
            a = (qu * np.sort(levels)[::-1]) @ qv.T
        else:
            a = rng.standard_normal((m, n)) * 10.0 ** rng.uniform(-3, 3)
        yield kind, a


def test_criterion_1_svd_oracle_suite():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst_rec = worst_orth = worst_sig = 0.0
    count = 0
    kinds = set()
    for kind, a in svd_cases(rng):
        f = svd(a)
        r = min(a.shape)
        worst_rec = max(worst_rec, frobenius_norm(f.reconstruct() - a) / max(1.0, frobenius_norm(a)))
        worst_orth = max(worst_orth, np.abs(f.U.T @ f.U - np.eye(r)).max(), np.abs(f.V.T @ f.V - np.eye(r)).max())
        oracle = gram_singular_values(a)
        worst_sig = max(worst_sig, np.abs(f.sigma - oracle).max() / f.sigma[0])
        count += 1
        kinds.add(kind)
    elapsed = time.perf_counter() - start
    ok = count == 200 and worst_rec <= 1e-10 and worst_orth <= 1e-10 and worst_sig <= 1e-8 and elapsed < 60
    report(1, "SVD oracle suite", ok,
           f"{count} matrices ({', '.join(sorted(kinds))}); reconstruction {worst_rec:.2e}, "
           f"orthonormality {worst_orth:.2e}, sigma vs Jacobi/Gram {worst_sig:.2e} of sigma_max; {elapsed:.1f}s")


def test_criterion_2_rms_norm_closed_form():
    rng = np.random.default_rng(202)
    worst_hi, worst_lo = -math.inf, 0.0
    for i in range(100):
        m = int(rng.integers(1, 65))
        n = int(rng.integers(1, 65))
        while n == m:
            n = int(rng.integers(1, 65))
        a = rng.standard_normal((m, n))
        closed = math.sqrt(n / m) * spectral_norm(a)
        assert closed == rms_to_rms_norm(a)
        searched = max_rms_ratio_search(a, n_vectors=10_000, seed=i)
        worst_hi = max(worst_hi, searched - closed)
        worst_lo = max(worst_lo, (closed - searched) / closed)
    ok = worst_hi <= 1e-6 and worst_lo <= 0.02
    report(2, "RMS->RMS norm closed form vs direct search", ok,
           f"100 rectangular matrices; search exceeds closed form by at most {worst_hi:.2e}, "
           f"falls short by at most {100 * worst_lo:.4f}%")


def test_criterion_3_rank_k_budget_optimum():
    rng = np.random.default_rng(303)
    start = time.perf_counter()
    worst_gap = -math.inf
    worst_value = worst_norm = 0.0
    violations = []
    runs = 0
    for _ in range(50):
        m, n = int(rng.integers(1, 17)), int(rng.integers(1, 17))
        d = rng.standard_normal((m, n))
        eta = float(rng.uniform(0.1, 3.0))
        budget = RmsBudget.for_matrix(d, eta)
        sigma = svd(d).sigma
        for k in range(1, min(m, n) + 1):
            rep = verify_theorem_bound(d, k, budget, trials=10_000, seed=int(rng.integers(2**31)))
            runs += 1
            worst_gap = max(worst_gap, rep.max_sampled - rep.p_star_value)
            closed = budget.tau * float(np.sum(sigma[:k]))
            worst_value = max(worst_value, abs(rep.p_star_value - closed) / closed)
            worst_norm = max(worst_norm, abs(rms_to_rms_norm(optimal_p_star(d, k, budget)) - eta) / eta)
            if not rep.passed:
                violations.append((m, n, k, rep.violations[:3]))
    elapsed = time.perf_counter() - start
    ok = not violations and worst_gap <= 1e-9 and worst_value <= 1e-10 and worst_norm <= 1e-8
    report(3, "rank-k spectral-budget optimum", ok,
           f"50 matrices, {runs} (matrix, k) runs x 10000 samples; max sampled - <D,P*> {worst_gap:.2e}; "
           f"<D,P*> vs tau*sum(sigma) {worst_value:.2e} rel; rms norm of P* vs eta {worst_norm:.2e} rel; "
           f"violations {violations[:2]}; {elapsed:.1f}s")


def test_criterion_4_edit_laws(toy_pre, toy_ft):
    pre, ft = read_checkpoint(toy_pre), read_checkpoint(toy_ft)
    chosen = select(ft.manifest.shapes(), EditConfig())
    worst = 0.0
    for name, params in chosen:
        d = ft.matrix(name) - pre.matrix(name)
        for beta in (params.beta, 1.8):
            e = orthogonalize(d, PomeParams(k_ratio=params.k_ratio, beta=beta))
            worst = max(worst,
                        abs(frobenius_norm(e.delta_hat_perp) - math.sqrt(e.k)) / math.sqrt(e.k),
                        abs(spectral_norm(e.delta_hat_perp) - 1.0),
                        abs(frobenius_norm(e.delta_hat) - beta * frobenius_norm(d)) / (beta * frobenius_norm(d)))
    example = orthogonalize(np.diag([4.0, 2.0, 1.0]), PomeParams(k_ratio=2 / 3, beta=1.0))
    alpha_err = abs(example.alpha - math.sqrt(21) / math.sqrt(2))
    ok = len(chosen) == 2 and worst <= 1e-8 and alpha_err <= 1e-10 and example.k == 2
    report(4, "edit-law identities", ok,
           f"{len(chosen)} edited toy tensors; worst identity error {worst:.2e}; "
           f"diag(4,2,1) alpha={example.alpha!r} (error {alpha_err:.1e})")


def test_criterion_5_polar_agreement():
    rng = np.random.default_rng(505)
    worst = 0.0
    for _ in range(50):
        m, n = int(rng.integers(1, 129)), int(rng.integers(1, 65))
        a = rng.standard_normal((m, n))
        f = svd(a)
        assert f.sigma[-1] > 1e-12 * f.sigma[0]  # full rank
        x = newton_schulz(a, max_iters=100)  # raises if 100 iterations do not suffice
        worst = max(worst, frobenius_norm(x - f.U @ f.V.T))
    report(5, "Newton-Schulz vs SVD polar factor", worst <= 1e-5,
           f"50 full-rank matrices up to 128x64; worst Frobenius gap {worst:.2e}")


def test_criterion_6_checkpoint_round_trip(tmp_path, toy_ft):
    src = read_checkpoint(toy_ft)
    # single file written by another implementation: every payload and the metadata survive
    write_checkpoint(list(src.records()), tmp_path / "single.safetensors", metadata=src.manifest.metadata)
    single = read_checkpoint(tmp_path / "single.safetensors")
    payload_ok = payload_hashes(toy_ft) == payload_hashes(tmp_path / "single.safetensors")
    meta_ok = single.manifest.metadata == src.manifest.metadata
    # our own files: read -> write reproduces every file byte for byte
    write_checkpoint(list(single.records()), tmp_path / "single2.safetensors", metadata=single.manifest.metadata)
    single_file_ok = sha((tmp_path / "single.safetensors").read_bytes()) == \
        sha((tmp_path / "single2.safetensors").read_bytes())
    names = src.names
    halves = [names[: len(names) // 2], names[len(names) // 2:]]
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    first = write_checkpoint(list(src.records()), tmp_path / "a" / "m.safetensors", metadata={"format": "pt"},
                             shard_groups=halves)
    sharded = read_checkpoint(tmp_path / "a" / "m.safetensors.index.json")
    groups = {}
    for name, shard in sharded.manifest.shard_map.items():
        groups.setdefault(shard, []).append(name)
    second = write_checkpoint(list(sharded.records()), tmp_path / "b" / "m.safetensors",
                              metadata=sharded.manifest.metadata, shard_groups=list(groups.values()))
    n_shards = len(groups)
    shard_ok = n_shards == 2 and [sha(p.read_bytes()) for p in first] == [sha(p.read_bytes()) for p in second]

    bits = np.arange(65536, dtype=np.uint32)
    finite = np.isfinite((bits << 16).view(np.float32))
    patterns = bits[finite].astype("<u2")
    rec = TensorRecord("all", "BF16", (1, patterns.size), patterns.tobytes())
    lossless = from_working(to_working(rec), "BF16").data == rec.data

    def narrow(f32_bits):
        value = np.array([[np.uint32(f32_bits).view(np.float32)]], dtype=np.float64)
        return int(np.frombuffer(from_working(value, "BF16").data, dtype="<u2")[0])

    below, tie = narrow(0x3F800001), narrow(0x3F808000)
    ok = payload_ok and meta_ok and single_file_ok and shard_ok and lossless and below == 0x3F80 and tie == 0x3F80
    report(6, "checkpoint round trip and BF16 conversion", ok,
           f"single-file payloads {payload_ok}, file hash {single_file_ok}; {n_shards}-shard file hashes {shard_ok}; "
           f"{int(finite.sum())} finite BF16 patterns lossless {lossless}; "
           f"0x3F800001->{below:#06x}, 0x3F808000->{tie:#06x}")


def test_criterion_7_golden_edit(tmp_path, toy_pre, toy_ft, toy_golden):
    out = tmp_path / "edited.safetensors"
    code = main(["edit", "--pre", str(toy_pre), "--ft", str(toy_ft), "--out", str(out)])
    ours, golden, ft = payload_hashes(out), payload_hashes(toy_golden), payload_hashes(toy_ft)
    edited = read_checkpoint(out)
    small = all(max(edited.info(n).shape) <= 8 for n, _ in select(edited.manifest.shapes(), EditConfig()))
    changed = sorted(n for n in ft if ours.get(n) != ft[n])
    untouched_ok = all(ours[n] == ft[n] for n in ft if n not in changed)
    ok = code == 0 and ours == golden and untouched_ok and small and len(changed) == 2
    report(7, "end-to-end golden edit", ok,
           f"exit {code}; {len(changed)} edited tensors bit-identical to the reference golden: {ours == golden}; "
           f"{len(ft) - len(changed)} other tensors hash-identical to the fine-tuned input: {untouched_ok}")


def test_criterion_8_determinism(tmp_path, toy_pre, toy_ft):
    results = []
    for layers in (None, "*_proj.weight"):
        hashes = []
        for jobs in ("1", "8"):
            out = tmp_path / f"j{jobs}-{'all' if layers else 'default'}.safetensors"
            argv = ["edit", "--pre", str(toy_pre), "--ft", str(toy_ft), "--out", str(out), "--jobs", jobs,
                    "--k-ratio", "0.75"]
            if layers:
                argv += ["--layers", layers]
            assert main(argv) == 0
            hashes.append(sha(out.read_bytes()))
        results.append(hashes[0] == hashes[1])
    report(8, "determinism across --jobs", all(results),
           f"--jobs 1 vs --jobs 8 byte-identical: default selection {results[0]}, all projections {results[1]}")


def test_criterion_9_rank_sweep(toy_pre, toy_ft):
    pre, ft = read_checkpoint(toy_pre), read_checkpoint(toy_ft)
    rng = np.random.default_rng(909)
    deltas = [ft.matrix(n) - pre.matrix(n) for n in ft.names if len(ft.info(n).shape) == 2]
    deltas += [rng.standard_normal((int(rng.integers(1, 40)), int(rng.integers(1, 40)))) for _ in range(40)]
    ratios = [0.05, 0.1, 0.25, 1 / 3, 0.5, 2 / 3, 0.75, 0.9, 1.0]
    worst = 0.0
    monotone = True
    rows_seen = 0
    for d in deltas:
        rows = rank_sweep(d, ratios)
        rows_seen += len(rows)
        worst = max(worst, *(abs(r.retained_energy + r.residual ** 2 - 1.0) for r in rows))
        res = [r.residual for r in rows]
        monotone &= all(b <= a for a, b in zip(res, res[1:]))
    ok = worst <= 1e-10 and monotone
    report(9, "rank-sweep consistency", ok,
           f"{len(deltas)} deltas, {rows_seen} rows; |energy + residual^2 - 1| <= {worst:.2e}; "
           f"residual non-increasing: {monotone}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
