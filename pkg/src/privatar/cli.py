"""Command-line harness: corpus, codecs, calibration, bounds, sweeps, attacks, perf, network.

Every subcommand writes into ``--out`` and is deterministic under
``--seed``. Exit codes: 0 success, 2 configuration error, 3 runtime or
protocol error.
"""

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import net
from .attack import write_reports_csv, write_reports_json
from .codec import load_codec
from .corpus import CorpusSpec, dataset_mean, generate, read_corpus, write_corpus
from .experiments import SWEEP_HEADER, run_attack, sweep_cells
from .frequency import PartitionPlan, block_dct, energy_rank, make_plan, save_texture
from .linalg import ConvergenceError, covariance
from .perfmodel import evaluate, load_profiles, perf_row, write_perf_csv
from .pipeline import load_system, offload_latents, save_system, train_system
from .privacy import (MI_PRESETS, NoiseCalibration, calibrate_damp, calibrate_isotropic_mi,
                      load_calibration, mi_from_psr, psr_from_mi, save_calibration)
from .rng import RngStream

log = logging.getLogger("privatar")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
DEFAULT_MS = (2, 4, 6, 8, 10, 12, 14)
DEFAULT_VS = ("1", "0.1", "0.01", "none")


class ConfigError(Exception):
    pass


def _say(args, *parts):
    if not args.quiet:
        print(*parts)


def _out(args, name):
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _v_list(text):
    out = []
    for x in text.split(","):
        if x == "none":
            out.append(None)
        else:
            try:
                out.append(float(x))
            except ValueError:
                raise argparse.ArgumentTypeError(f"bad MI budget {x!r}")
    return out


def _address(text):
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def _load_corpus(path):
    if not os.path.isfile(os.path.join(path, "index.csv")):
        raise ConfigError(f"{path}: not a corpus directory (no index.csv)")
    return read_corpus(path)


def _load_calib(path, d):
    if path is None:
        return None
    cal = load_calibration(path)
    if cal.dim != d:
        raise ConfigError(f"calibration dim {cal.dim} does not match codec latent dim {d}")
    return cal


# -- subcommands ------------------------------------------------------------

def cmd_gen_corpus(args):
    spec = CorpusSpec.from_file(args.spec) if args.spec else CorpusSpec()
    if args.seed is not None:
        spec = CorpusSpec(**{**spec.__dict__, "seed": args.seed})
    corpus = generate(spec)
    write_corpus(corpus, args.out)
    _say(args, f"wrote {len(corpus)} frames ({spec.classes} classes) to {args.out}")


def cmd_rank(args):
    corpus = _load_corpus(args.corpus)
    mean = dataset_mean(corpus)
    ranking = energy_rank([block_dct(t, mean, args.block) for t in corpus.textures], args.mode)
    share = ranking.share()
    rank_of = {k: i for i, k in enumerate(reversed(ranking.order))}
    with open(_out(args, "ranking.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("component", "u", "v", "statistic", "share", "rank"))
        for k in range(args.block * args.block):
            w.writerow((k, k // args.block, k % args.block, repr(float(ranking.statistic[k])),
                        repr(float(share[k])), rank_of[k]))
    top = ranking.order[-1]
    _say(args, f"component {top} ranks highest with {share[top]:.1%} of component energy")


def cmd_train_codec(args):
    corpus = _load_corpus(args.corpus)
    mean = dataset_mean(corpus)
    if args.full_offload:
        plan = PartitionPlan.full_offload(args.block)
    else:
        ranking = energy_rank([block_dct(t, mean, args.block) for t in corpus.textures])
        plan = make_plan(ranking, args.m, keep_base_local=True)
    system = train_system(corpus.textures, mean, plan, args.latent_dim)
    save_system(args.out, system)
    _say(args, f"plan offloads {list(plan.offloaded_ids)}; offloaded codec "
               f"{system.offload_codec.content_hash:016x} -> {args.out}")


def cmd_calibrate(args):
    system = load_system(args.plan)
    corpus = _load_corpus(args.corpus)
    cov = covariance(offload_latents(system, corpus.textures))
    fn = calibrate_damp if args.kind == "damp" else calibrate_isotropic_mi
    cal = fn(cov, args.v, backend=args.backend)
    save_calibration(_out(args, "calibration.pcal"), cal)
    _say(args, f"{args.kind} calibration v={args.v}: noise trace {cal.trace:.6g}, "
               f"hash {cal.content_hash:016x}")


def cmd_bound(args):
    prior = 1.0 / args.classes
    if args.psr is not None:
        v = mi_from_psr(args.psr, prior)
        _say(args, f"psr={args.psr:g} classes={args.classes} -> v={v:.6g}")
        return
    vs = [args.v] if args.v is not None else list(MI_PRESETS)
    for v in vs:
        _say(args, f"v={v:g} classes={args.classes} -> t-psr={psr_from_mi(v, prior):.6g}")


def _profiles(args):
    profiles = load_profiles(args.config)
    try:
        return (profiles, profiles.workloads[args.workload], profiles.devices[args.device],
                profiles.devices[args.offload_device], profiles.links[args.link])
    except KeyError as exc:
        raise ConfigError(f"unknown profile {exc.args[0]!r}") from None


def _perf_fn(args):
    _, w, dev, host, link = _profiles(args)

    def perf(m):
        r = evaluate(w.with_m(m), dev, host, link)
        return r.users, r.joules
    return perf


def cmd_sweep(args):
    corpus = _load_corpus(args.corpus)
    mean = dataset_mean(corpus)
    ms, vs = args.m, args.v
    for m in ms:
        if not 2 <= m <= args.block * args.block - 2:
            raise ConfigError(f"m={m} outside [2, {args.block ** 2 - 2}]")
    if not args.train:
        raise ConfigError("sweep trains one codec pair per m; pass --train")
    ranking = energy_rank([block_dct(t, mean, args.block) for t in corpus.textures])
    rows = list(sweep_cells(corpus, ranking, ms, vs, seed=args.seed or 0, trials=args.trials,
                            loss_frames=min(args.loss_frames, len(corpus)),
                            perf=_perf_fn(args), eig_backend=args.backend))
    with open(_out(args, "sweep.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_HEADER)
        for row in rows:
            w.writerow([x if isinstance(x, (int, str)) else repr(float(x)) for x in row])
    summary = {"m": ms, "v": ["none" if v is None else v for v in vs], "seed": args.seed or 0,
               "trials": args.trials, "rows": len(rows), "header": list(SWEEP_HEADER)}
    with open(_out(args, "sweep.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for row in rows:
        _say(args, "  ".join(str(x) if isinstance(x, (int, str)) else f"{x:.4g}" for x in row))


def cmd_attack(args):
    system = load_system(args.plan)
    corpus = _load_corpus(args.corpus)
    cal = _load_calib(args.calib, system.offload_codec.latent_dim)
    attackers = ("empirical", "nn") if args.attacker == "both" else (args.attacker,)
    cal = cal or NoiseCalibration.zero(system.offload_codec.latent_dim)
    res = run_attack(corpus, system.plan, seed=args.seed or 0, trials=args.trials,
                     attackers=attackers, system=system, calibration=cal,
                     mlp_epochs=args.epochs)
    reports = [res.reports[k] for k in (*attackers, "combined")]
    write_reports_csv(_out(args, "attack.csv"), reports)
    write_reports_json(_out(args, "attack.json"), reports,
                       {"seed": args.seed or 0, "m": system.plan.m, "v": cal.v,
                        "prior": 1.0 / (int(corpus.labels.max()) + 1)})
    for r in reports:
        lo, hi = r.ci
        _say(args, f"{r.attacker:10s} e-psr={r.e_psr:.4f}  95% CI [{lo:.4f}, {hi:.4f}]")


def cmd_perf(args):
    profiles, w, dev, host, link = _profiles(args)
    rows, base_users = [], None
    for m in args.m:
        report = evaluate(w.with_m(m), dev, host, link)
        if m == 0:
            base_users = report.users
        rows.append(perf_row(m, "none", report))
    write_perf_csv(_out(args, "perf.csv"), rows)
    _say(args, "m  local_ms  offload_ms  comm_ms  users  users/W  joules")
    for r in rows:
        _say(args, f"{r[0]:2d}  {r[2]:8.3f}  {r[3]:10.4f}  {r[4]:7.3f}  {r[5]:.4g}  "
                   f"{r[6]:.4g}  {r[7]:.4g}")
    if base_users and 14 in args.m:
        m14 = rows[args.m.index(14)][5]
        _say(args, f"users m=14 vs baseline: {m14 / base_users:.2f}x "
                   f"(published measurement: 2.37x; depends on unpublished model inputs)")
    cpu = profiles.extras.get(args.workload, {}).get("measured_cpu_baseline_latency")
    if cpu:
        _say(args, f"measured single-stage baseline {cpu * 1e3:.2f} ms -> "
                   f"{1.0 / (w.fps * cpu):.4f} users")


def cmd_serve(args):
    codecs = [load_codec(p) for p in args.codec]
    host = net.OffloadHost(codecs, idle_timeout=args.idle_timeout)
    server = net._Server(args.listen, net._Handler)
    server.host = host
    addr = server.server_address
    print(f"listening on {addr[0]}:{addr[1]}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


def cmd_offload(args):
    system = load_system(args.plan)
    cal = _load_calib(args.calib, system.offload_codec.latent_dim)
    if cal is not None:
        system = system.with_calibration(cal)
    corpus = _load_corpus(args.frames)
    frames = corpus.frames[:args.count] if args.count else corpus.frames
    textures = [f.texture for f in frames]
    rng = RngStream(args.seed or 0, b"offload")
    try:
        outputs, entries = net.client_session(args.connect, textures, system, rng,
                                              timeout=args.timeout_ms / 1000.0,
                                              frame_ids=[f.frame_id for f in frames])
    except net.OffloadError as exc:
        _write_timing(args, exc.log)
        raise
    recon_dir = _out(args, "recon")
    os.makedirs(recon_dir, exist_ok=True)
    for f, tex in zip(frames, outputs):
        save_texture(os.path.join(recon_dir, f"frame_{f.frame_id:06d}.ptex"), tex)
    _write_timing(args, entries)
    err = float(np.mean([np.mean((o - t) ** 2) for o, t in zip(outputs, textures)]))
    _say(args, f"reconstructed {len(outputs)} frames via {args.connect[0]}:{args.connect[1]}; "
               f"mean MSE {err:.6g}")


TIMING_HEADER = ("frame_id", "encode_ms", "roundtrip_ms", "merge_ms")


def _write_timing(args, entries):
    # wall-clock timings: the only non-deterministic output of any subcommand
    with open(_out(args, "offload_timing.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TIMING_HEADER)
        for e in entries:
            w.writerow((e.frame_id, f"{1e3 * e.encode_s:.3f}", f"{1e3 * e.roundtrip_s:.3f}",
                        f"{1e3 * e.merge_s:.3f}"))


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="privatar", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    p.add_argument("--config", default=None, help="device/link/workload profile file")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-corpus", help="generate the synthetic expression corpus")
    s.add_argument("--spec", help="INI file with a [corpus] section")
    s.set_defaults(fn=cmd_gen_corpus)

    s = sub.add_parser("rank", help="rank frequency components by corpus energy")
    s.add_argument("--corpus", required=True)
    s.add_argument("--block", type=int, default=4)
    s.add_argument("--mode", choices=("variance", "raw"), default="variance")
    s.set_defaults(fn=cmd_rank)

    s = sub.add_parser("train-codec", help="build a partition plan and train both path codecs")
    s.add_argument("--corpus", required=True)
    s.add_argument("--m", type=int, default=14, help="number of offloaded components")
    s.add_argument("--block", type=int, default=4)
    s.add_argument("--latent-dim", type=int, default=256)
    s.add_argument("--full-offload", action="store_true")
    s.set_defaults(fn=cmd_train_codec)

    s = sub.add_parser("calibrate", help="fit offloaded-latent noise for an MI budget")
    s.add_argument("--plan", required=True, help="plan.json written by train-codec")
    s.add_argument("--corpus", required=True)
    s.add_argument("--v", type=float, required=True)
    s.add_argument("--kind", choices=("damp", "iso"), default="damp")
    s.add_argument("--backend", choices=("jacobi", "lapack"), default="jacobi")
    s.set_defaults(fn=cmd_calibrate)

    s = sub.add_parser("bound", help="map MI budget <-> posterior success rate")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--v", type=float)
    g.add_argument("--psr", type=float)
    s.add_argument("--classes", type=int, default=65)
    s.set_defaults(fn=cmd_bound)

    s = sub.add_parser("sweep", help="loss / privacy / throughput over (m, v)")
    s.add_argument("--corpus", required=True)
    s.add_argument("--train", action="store_true", help="train codecs for every m")
    s.add_argument("--m", type=_int_list, default=list(DEFAULT_MS))
    s.add_argument("--v", type=_v_list, default=_v_list(",".join(DEFAULT_VS)))
    s.add_argument("--block", type=int, default=4)
    s.add_argument("--trials", type=int, default=500)
    s.add_argument("--loss-frames", type=int, default=65)
    s.add_argument("--backend", choices=("jacobi", "lapack"), default="jacobi")
    _perf_args(s)
    s.set_defaults(fn=cmd_sweep)

    s = sub.add_parser("attack", help="mount the empirical and NN attackers")
    s.add_argument("--plan", required=True)
    s.add_argument("--calib", help="PCAL file (omit for no noise)")
    s.add_argument("--corpus", required=True)
    s.add_argument("--attacker", choices=("both", "empirical", "nn"), default="both")
    s.add_argument("--trials", type=int, default=2000)
    s.add_argument("--epochs", type=int, default=10)
    s.set_defaults(fn=cmd_attack)

    s = sub.add_parser("perf", help="latency / users / energy table")
    s.add_argument("--m", type=_int_list, default=[0, 2, 4, 6, 8, 10, 12, 14])
    _perf_args(s)
    s.set_defaults(fn=cmd_perf)

    s = sub.add_parser("serve", help="run the untrusted offload host")
    s.add_argument("--listen", type=_address, required=True)
    s.add_argument("--codec", action="append", required=True)
    s.add_argument("--idle-timeout", type=float, default=30.0)
    s.set_defaults(fn=cmd_serve)

    s = sub.add_parser("offload", help="reconstruct frames through a running host")
    s.add_argument("--connect", type=_address, required=True)
    s.add_argument("--plan", required=True)
    s.add_argument("--calib")
    s.add_argument("--frames", required=True, help="corpus directory")
    s.add_argument("--count", type=int, default=0, help="first N frames (default all)")
    s.add_argument("--timeout-ms", type=int, default=5000)
    s.set_defaults(fn=cmd_offload)
    return p


def _perf_args(s):
    s.add_argument("--device", default="quest_pro")
    s.add_argument("--offload-device", default="rtx5090")
    s.add_argument("--link", default="wifi7")
    s.add_argument("--workload", default="published")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        args.fn(args)
    except (net.OffloadError, ConvergenceError, ConnectionError, TimeoutError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, FileNotFoundError, IsADirectoryError, KeyError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
