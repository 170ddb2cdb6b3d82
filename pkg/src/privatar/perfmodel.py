"""Analytic latency, throughput and energy model for partial offloading.

Per user-frame the headset runs the mesh decoder plus the local share of the
texture decoder, the host decodes the offloaded components, and the link
carries the latent upload and the returned planes. Each stage is a
pipelined resource; the number of users sustainable at ``fps`` is set by
the slowest stage.
"""

import configparser
import csv
import math
from dataclasses import dataclass, field, replace
from importlib import resources

GOP = 1e9


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    peak_compute: float
    mem_bandwidth: float = math.inf
    compute_efficiency: float = 32.0  # GOP/s per watt

    def __post_init__(self):
        if not (self.peak_compute > 0 and self.mem_bandwidth > 0 and self.compute_efficiency > 0):
            raise ValueError(f"device {self.name}: rates must be positive")


@dataclass(frozen=True)
class LinkProfile:
    name: str
    bandwidth: float
    per_bit_energy: float

    def __post_init__(self):
        if not (self.bandwidth > 0 and self.per_bit_energy > 0):
            raise ValueError(f"link {self.name}: bandwidth and energy must be positive")


@dataclass(frozen=True)
class WorkloadProfile:
    B: int = 4
    m: int = 0
    F_tex: float = 0.0
    F_fixed: float = 0.0
    return_bytes_per_component: float = 0.0
    upload_bytes: float = 0.0
    fps: float = 60.0
    baseline_flops: float = None
    local_latency: float = None
    offload_latency: float = None
    comm_latency: float = None

    def __post_init__(self):
        if not 0 <= self.m <= self.B * self.B:
            raise ValueError(f"m={self.m} outside [0, {self.B * self.B}]")
        if self.F_tex < 0 or self.F_fixed < 0:
            raise ValueError("FLOP counts must be non-negative")
        if not self.fps > 0:
            raise ValueError("fps must be positive")

    def with_m(self, m: int) -> "WorkloadProfile":
        return replace(self, m=m)


@dataclass
class PerfReport:
    stages: dict
    users: float
    users_per_watt: float
    energy: dict = field(default_factory=dict)

    @property
    def joules(self) -> float:
        return self.energy.get("total", 0.0)


def fit_flop_anchors(B: int, anchor_a, anchor_b):
    """Solve ``F_fixed + (B^2 - m)/B^2 * F_tex = flops`` through two (m, flops) points.

    Returns ``(F_tex, F_fixed)``.
    """
    (m1, f1), (m2, f2) = anchor_a, anchor_b
    n = B * B
    k1, k2 = (n - m1) / n, (n - m2) / n
    if k1 == k2:
        raise ValueError("anchors must use different m")
    F_tex = (f1 - f2) / (k1 - k2)
    F_fixed = f1 - k1 * F_tex
    return F_tex, F_fixed


def local_flops(w: WorkloadProfile) -> float:
    n = w.B * w.B
    return w.F_fixed + (n - w.m) / n * w.F_tex


def offload_flops(w: WorkloadProfile) -> float:
    return w.m / (w.B * w.B) * w.F_tex


def roofline_latency(flops: float, dev: DeviceProfile, bytes_moved: float = None) -> float:
    compute = flops / dev.peak_compute
    if bytes_moved is None:
        return compute
    return max(compute, bytes_moved / dev.mem_bandwidth)


def comm_latency(nbytes: float, link: LinkProfile) -> float:
    return 8.0 * nbytes / link.bandwidth


def transfer_bytes(w: WorkloadProfile) -> float:
    if w.m == 0:
        return 0.0
    return w.upload_bytes + w.m * w.return_bytes_per_component


def pipeline_users(latencies, fps: float = 60.0) -> float:
    """Users sustainable at ``fps`` when each stage is its own pipelined resource."""
    latencies = list(latencies.values()) if isinstance(latencies, dict) else list(latencies)
    if not latencies:
        raise ValueError("need at least one stage")
    caps = [math.inf if lat <= 0 else 1.0 / (fps * lat) for lat in latencies]
    return min(caps)


def compute_energy(ops: float, dev: DeviceProfile) -> float:
    return ops / (dev.compute_efficiency * GOP)


def energy_report(flops_local: float, flops_offload: float, bits_moved: float,
                  local_dev: DeviceProfile, offload_dev: DeviceProfile,
                  link: LinkProfile) -> dict:
    """Joules per user-frame, split by where they are spent."""
    e = {
        "local": compute_energy(flops_local, local_dev),
        "offload": compute_energy(flops_offload, offload_dev),
        "comm": bits_moved * link.per_bit_energy,
    }
    e["total"] = e["local"] + e["offload"] + e["comm"]
    return e


def evaluate(w: WorkloadProfile, local_dev: DeviceProfile, offload_dev: DeviceProfile = None,
             link: LinkProfile = None) -> PerfReport:
    """Stage latencies, user count and energy for one workload.

    ``m == 0`` is the unpartitioned baseline: only the headset stage exists,
    costing ``baseline_flops`` (falls back to the full decoder
    ``F_fixed + F_tex``). Measured latencies on the profile override the
    modelled ones.
    """
    if w.m == 0:
        flops_l = w.baseline_flops if w.baseline_flops is not None else w.F_fixed + w.F_tex
        flops_o, nbytes = 0.0, 0.0
    else:
        if offload_dev is None or link is None:
            raise ValueError("partitioned workloads need an offload device and a link")
        flops_l, flops_o, nbytes = local_flops(w), offload_flops(w), transfer_bytes(w)
    stages = {"local": w.local_latency if w.local_latency is not None
              else roofline_latency(flops_l, local_dev)}
    if w.m > 0:
        stages["offload"] = (w.offload_latency if w.offload_latency is not None
                             else roofline_latency(flops_o, offload_dev))
        stages["comm"] = (w.comm_latency if w.comm_latency is not None
                          else comm_latency(nbytes, link))
    users = pipeline_users(stages, w.fps)
    energy = energy_report(flops_l, flops_o, 8.0 * nbytes, local_dev,
                           offload_dev or local_dev, link or LinkProfile("none", 1.0, 1e-30))
    per_user_watts = energy["total"] * w.fps
    return PerfReport(stages, users, 1.0 / per_user_watts if per_user_watts > 0 else math.inf,
                      energy)


# -- profile config ---------------------------------------------------------

@dataclass
class Profiles:
    devices: dict
    links: dict
    workloads: dict
    extras: dict


def _float(section, key, default=None):
    if key not in section:
        if default is None:
            raise KeyError(f"[{section.name}] missing {key}")
        return default
    return float(section[key])


def parse_profiles(text: str) -> Profiles:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.read_string(text)
    devices, links, workloads, extras = {}, {}, {}, {}
    for name in cp.sections():
        sec = cp[name]
        kind, _, key = name.partition(".")
        if kind == "device":
            devices[key] = DeviceProfile(key, _float(sec, "peak_compute"),
                                         _float(sec, "mem_bandwidth", math.inf),
                                         _float(sec, "compute_efficiency", 32.0))
        elif kind == "link":
            links[key] = LinkProfile(key, _float(sec, "bandwidth"), _float(sec, "per_bit_energy"))
        elif kind == "workload":
            B = int(sec.get("block", "4"))
            if "anchor_flops_high" in sec:
                F_tex, F_fixed = fit_flop_anchors(
                    B, (int(sec["anchor_m_high"]), float(sec["anchor_flops_high"])),
                    (int(sec["anchor_m_low"]), float(sec["anchor_flops_low"])))
            else:
                F_tex, F_fixed = _float(sec, "f_tex"), _float(sec, "f_fixed")
            workloads[key] = WorkloadProfile(
                B=B, m=int(sec.get("m", "0")), F_tex=F_tex, F_fixed=F_fixed,
                return_bytes_per_component=_float(sec, "return_bytes_per_component", 0.0),
                upload_bytes=_float(sec, "upload_bytes", 0.0),
                fps=_float(sec, "fps", 60.0),
                baseline_flops=float(sec["baseline_flops"]) if "baseline_flops" in sec else None)
            extras[key] = {k: float(v) for k, v in sec.items()
                           if k.startswith("measured_") or k == "baseline_loss"}
        else:
            raise ValueError(f"unknown profile section [{name}]")
    return Profiles(devices, links, workloads, extras)


def load_profiles(path=None) -> Profiles:
    """Parse a profile file; ``None`` loads the bundled published defaults."""
    if path is None:
        text = resources.files("privatar").joinpath("published_defaults.ini").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    return parse_profiles(text)


PERF_CSV_HEADER = ("m", "v", "local_ms", "offload_ms", "comm_ms", "users", "users_per_watt",
                   "joules")


def perf_row(m: int, v, report: PerfReport) -> tuple:
    s = report.stages
    return (m, v, 1e3 * s.get("local", 0.0), 1e3 * s.get("offload", 0.0),
            1e3 * s.get("comm", 0.0), report.users, report.users_per_watt, report.joules)


def write_perf_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PERF_CSV_HEADER)
        for row in rows:
            w.writerow(row)
