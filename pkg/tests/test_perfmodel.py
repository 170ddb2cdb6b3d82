import math

import pytest

from privatar.perfmodel import (PERF_CSV_HEADER, DeviceProfile, LinkProfile, WorkloadProfile,
                                comm_latency, compute_energy, evaluate, fit_flop_anchors,
                                load_profiles, local_flops, offload_flops, parse_profiles,
                                perf_row, pipeline_users, roofline_latency, transfer_bytes,
                                write_perf_csv)


@pytest.fixture(scope="module")
def published():
    return load_profiles()


def test_anchor_fit_hand_values():
    # F_fixed + (16-m)/16 F_tex through (14, 1.48G) and (2, 6.07G):
    # F_tex = 4.59G / 0.75 = 6.12G, F_fixed = 1.48G - 6.12G/8 = 0.715G
    F_tex, F_fixed = fit_flop_anchors(4, (14, 1.48e9), (2, 6.07e9))
    assert F_tex == pytest.approx(6.12e9, rel=1e-12)
    assert F_fixed == pytest.approx(0.715e9, rel=1e-12)
    with pytest.raises(ValueError):
        fit_flop_anchors(4, (2, 1.0), (2, 2.0))


def test_published_profile_contents(published):
    assert published.devices["quest_pro"].peak_compute == 902e9
    assert published.devices["quest3"].peak_compute / published.devices["quest_pro"].peak_compute == \
        pytest.approx(4.11, abs=0.01)
    assert published.links["wifi7"].bandwidth == 20e9
    assert published.links["wifi7"].per_bit_energy == 13.94e-9
    assert published.extras["published"]["baseline_loss"] == 0.072
    w = published.workloads["published"]
    assert local_flops(w.with_m(14)) == pytest.approx(1.48e9, rel=1e-12)
    assert local_flops(w.with_m(2)) == pytest.approx(6.07e9, rel=1e-12)


def test_local_flops_monotone_and_conserved(published):
    w = published.workloads["published"]
    vals = [local_flops(w.with_m(m)) for m in range(0, 17)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    for m in range(17):
        assert local_flops(w.with_m(m)) + offload_flops(w.with_m(m)) == \
            pytest.approx(w.F_fixed + w.F_tex)


def test_roofline_and_comm():
    dev = DeviceProfile("d", 1e12, 1e11)
    assert roofline_latency(2e12, dev) == 2.0
    assert roofline_latency(1e9, dev, bytes_moved=1e11) == 1.0
    link = LinkProfile("l", 20e9, 13.94e-9)
    assert comm_latency(2.5e9, link) == 1.0
    assert transfer_bytes(WorkloadProfile(m=2, return_bytes_per_component=10, upload_bytes=4)) == 24
    assert transfer_bytes(WorkloadProfile(m=0, return_bytes_per_component=10)) == 0


def test_pipeline_users():
    assert pipeline_users([15.47e-3]) == pytest.approx(1.0774, abs=1e-4)
    assert pipeline_users({"a": 1 / 120, "b": 1 / 240}) == pytest.approx(2.0)
    assert pipeline_users([0.0, 1 / 60]) == pytest.approx(1.0)
    assert pipeline_users([0.0]) == math.inf
    with pytest.raises(ValueError):
        pipeline_users([])


def test_energy(published):
    assert compute_energy(32e9, published.devices["quest_pro"]) == pytest.approx(1.0)
    w = published.workloads["published"]
    base = evaluate(w, published.devices["quest_pro"])
    assert base.energy["local"] == pytest.approx(6.062e9 / 32e9)
    assert base.energy["comm"] == 0.0
    r = evaluate(w.with_m(14), published.devices["quest_pro"], published.devices["rtx5090"],
                 published.links["wifi7"])
    bits = 8 * (1024 + 14 * 786432)
    assert r.energy["comm"] == pytest.approx(bits * 13.94e-9)
    assert r.joules == pytest.approx(sum(r.energy[k] for k in ("local", "offload", "comm")))
    assert r.users_per_watt == pytest.approx(1 / (r.joules * 60))


def test_baseline_users(published):
    base = evaluate(published.workloads["published"], published.devices["quest_pro"])
    assert base.users == pytest.approx(902 / (6.062 * 60), rel=1e-12)
    assert set(base.stages) == {"local"}


def test_measured_latency_override(published):
    w = WorkloadProfile(F_tex=1.0, local_latency=15.47e-3)
    assert evaluate(w, published.devices["cpu_baseline"]).users == pytest.approx(1.0774, abs=1e-4)


def test_partitioned_needs_host(published):
    with pytest.raises(ValueError):
        evaluate(published.workloads["published"].with_m(4), published.devices["quest_pro"])


def test_validation():
    with pytest.raises(ValueError):
        DeviceProfile("x", 0.0)
    with pytest.raises(ValueError):
        LinkProfile("x", 1.0, 0.0)
    with pytest.raises(ValueError):
        WorkloadProfile(m=17)
    with pytest.raises(ValueError):
        parse_profiles("[gizmo.x]\na = 1\n")
    with pytest.raises(KeyError):
        parse_profiles("[device.x]\nmem_bandwidth = 1\n")


def test_custom_profile_text():
    p = parse_profiles("[device.d]\npeak_compute = 1e9\n[link.l]\nbandwidth = 8\n"
                       "per_bit_energy = 1e-9\n[workload.w]\nblock = 2\nf_tex = 4e9\nf_fixed = 0\n")
    w = p.workloads["w"]
    assert w.B == 2 and local_flops(w.with_m(2)) == pytest.approx(2e9)


def test_perf_csv(tmp_path, published):
    r = evaluate(published.workloads["published"], published.devices["quest_pro"])
    write_perf_csv(tmp_path / "p.csv", [perf_row(0, "none", r)])
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == ",".join(PERF_CSV_HEADER) == \
        "m,v,local_ms,offload_ms,comm_ms,users,users_per_watt,joules"
