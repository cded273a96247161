"""Data layer: CSV round trips, windowing arithmetic, splits, synthetic corpus."""

import numpy as np
import pytest

from platoonkit import data, idm


def _tiny_record(pid="p0", T=8, n_follow=2):
    # Leader at 10 m/s, followers offset by fixed gaps; speeds distinct per
    # vehicle so feature checks can tell rows apart.
    vehicles = []
    for i in range(n_follow + 1):
        speed = np.full(T, 10.0 - i)
        position = (50.0 - 20.0 * i) + np.arange(T) * 0.1 * (10.0 - i)
        vehicles.append(data.VehicleSeries(position, speed, 4.0))
    return data.PlatoonRecord(pid, data.DT, tuple(vehicles))


def test_gap_and_rel_speed_definitions():
    rec = _tiny_record()
    gaps = rec.gaps()
    pos = rec.positions()
    assert np.allclose(gaps[0], pos[0] - 4.0 - pos[1])
    assert np.allclose(rec.rel_speeds()[1], rec.speeds()[1] - rec.speeds()[2])
    feats = rec.feature_block(2, 5)
    assert feats.shape == (2, 3, 3)
    assert np.allclose(feats[0, :, 0], rec.speeds()[1, 2:5])
    assert np.allclose(feats[1, :, 1], gaps[1, 2:5])


def test_window_counts():
    # floor((T - (P+F)) / stride) + 1 with P=21, F=20
    def count(T, stride=1):
        vehicles = tuple(
            data.VehicleSeries(np.full(T, 100.0 - 30.0 * i) + np.arange(T),
                               np.full(T, 10.0), 4.0)
            for i in range(2))
        rec = data.PlatoonRecord("w", data.DT, vehicles)
        return len(data.extract_windows(rec, 21, 20, stride))

    assert count(150) == 110
    assert count(40) == 0
    assert count(41) == 1
    assert count(150, stride=7) == 16


def test_window_contents_align_with_record():
    rec = _tiny_record(T=12)
    wins = data.extract_windows(rec, history_len=4, horizon=3, stride=2)
    assert len(wins) == (12 - 7) // 2 + 1
    w = wins[1]
    assert w.anchor == 2 + 4 - 1
    spd = rec.speeds()
    gaps = rec.gaps()
    assert np.array_equal(w.history[:, :, 0], spd[1:, 2:6])
    assert np.array_equal(w.history[:, :, 1], gaps[:, 2:6])
    assert np.array_equal(w.history[:, :, 2], rec.rel_speeds()[:, 2:6])
    assert np.array_equal(w.lead_future, spd[0, 6:9])
    assert np.array_equal(w.targets[:, :, 0], spd[1:, 6:9])
    assert np.array_equal(w.targets[:, :, 1], gaps[:, 6:9])


def test_split_counts_and_partition():
    def fakes(M):
        return [_tiny_record(pid=f"p{i:04d}", T=2) for i in range(M)]

    train, val, test = data.split_dataset(fakes(739), seed=1)
    assert (len(train), len(val), len(test)) == (517, 74, 148)
    train, val, test = data.split_dataset(fakes(10), seed=1)
    assert (len(train), len(val), len(test)) == (7, 1, 2)

    recs = fakes(53)
    train, val, test = data.split_dataset(recs, seed=9)
    ids = [r.platoon_id for r in train + val + test]
    assert sorted(ids) == sorted(r.platoon_id for r in recs)
    assert len(set(ids)) == len(ids)

    again = data.split_dataset(recs, seed=9)
    assert [r.platoon_id for r in again[0]] == [r.platoon_id for r in train]
    other = data.split_dataset(recs, seed=10)
    assert [r.platoon_id for r in other[0]] != [r.platoon_id for r in train]


def test_split_ratio_validation():
    with pytest.raises(ValueError):
        data.split_dataset([_tiny_record()], ratios=(0.5, 0.2, 0.2))


def test_csv_round_trip_is_byte_exact(tmp_path):
    records = data.generate_synthetic_platoons(3, n_followers=2, duration_s=4.0,
                                               seed=21)
    f1 = tmp_path / "a.csv"
    data.write_trajectories(records, f1)
    loaded = data.load_trajectories(f1)
    assert [r.platoon_id for r in loaded] == [r.platoon_id for r in records]
    f2 = tmp_path / "b.csv"
    data.write_trajectories(loaded, f2)
    assert f1.read_bytes() == f2.read_bytes()
    assert b"\r" not in f1.read_bytes()


def test_generation_deterministic(tmp_path):
    a = data.generate_synthetic_platoons(2, n_followers=3, duration_s=5.0, seed=42)
    b = data.generate_synthetic_platoons(2, n_followers=3, duration_s=5.0, seed=42)
    fa, fb = tmp_path / "a.csv", tmp_path / "b.csv"
    data.write_trajectories(a, fa)
    data.write_trajectories(b, fb)
    assert fa.read_bytes() == fb.read_bytes()
    c = data.generate_synthetic_platoons(2, n_followers=3, duration_s=5.0, seed=43)
    fc = tmp_path / "c.csv"
    data.write_trajectories(c, fc)
    assert fc.read_bytes() != fa.read_bytes()


def test_generated_records_satisfy_invariants():
    records = data.generate_synthetic_platoons(5, n_followers=4, duration_s=8.0,
                                               seed=3)
    assert len(records) == 5
    for rec in records:
        assert data.validate_record(rec) is None
        assert rec.duration == 80
        assert rec.n_followers == 4


def test_gap_delta_identity_on_synthetic():
    # s(t+1) - s(t) == dt * dv(t): Euler integration makes this exact.
    for rec in data.generate_synthetic_platoons(3, n_followers=3, duration_s=6.0,
                                                seed=17):
        gaps = rec.gaps()
        dv = rec.rel_speeds()
        resid = gaps[:, 1:] - gaps[:, :-1] - rec.dt * dv[:, :-1]
        assert np.abs(resid).max() < 1e-9


def test_constant_lead_at_equilibrium_stays_constant():
    p = idm.IdmParams(30.0, 1.2, 2.0, 1.0, 1.5)
    profile = data.LeadProfile("const_accel", v_init=20.0, accel=0.0)
    rec = data.synthesize_platoon("eq", profile, [p, p], np.full(3, 4.5),
                                  noise_sigma=0.0, noise_seed=0, duration_steps=100)
    assert np.abs(rec.speeds() - 20.0).max() < 1e-9


def test_lead_profiles_shapes_and_bounds():
    for kind in data.PROFILE_KINDS:
        profile = data.LeadProfile(kind, v_init=20.0, accel=-0.5, amp=3.0,
                                   period_s=8.0, seed=5)
        v = data.lead_speed_series(profile, 200)
        assert v.shape == (200,)
        assert v.min() >= 0.0 and v.max() <= data.SPEED_CAP
    v1 = data.lead_speed_series(data.LeadProfile("piecewise", 15.0, seed=7), 300)
    v2 = data.lead_speed_series(data.LeadProfile("piecewise", 15.0, seed=7), 300)
    assert np.array_equal(v1, v2)
    assert np.abs(np.diff(v1)).max() <= 1.5 * data.DT + 1e-12


def test_malformed_row_raises_with_line_number(tmp_path):
    f = tmp_path / "bad.csv"
    f.write_text("platoon_id,vehicle_index,frame,position_m,speed_mps,length_m\n"
                 "p0,0,0,0.0,10.0,4.5\n"
                 "p0,0,1,oops,10.0,4.5\n")
    with pytest.raises(data.DataFormatError) as exc:
        data.load_trajectories(f)
    assert ":3" in str(exc.value)


def test_bad_header_rejected(tmp_path):
    f = tmp_path / "bad.csv"
    f.write_text("a,b,c\n")
    with pytest.raises(data.DataFormatError):
        data.load_trajectories(f)


def test_overlapping_platoon_rejected_with_frame_diagnostic(tmp_path):
    rec = _tiny_record("good", T=12)
    f = tmp_path / "mix.csv"
    data.write_trajectories([rec], f)
    # append a platoon whose follower overlaps its leader at frame 10
    lines = []
    for t in range(12):
        lines.append(f"overlap,0,{t},{50 + t},10,4")
        follower_pos = 40 + t if t < 10 else 50 + t  # gap collapses at t=10
        lines.append(f"overlap,1,{t},{follower_pos},10,4")
    with open(f, "a") as fh:
        fh.write("\n".join(lines) + "\n")
    rejects = []
    records = data.load_trajectories(f, rejects=rejects)
    assert [r.platoon_id for r in records] == ["good"]
    assert len(rejects) == 1
    assert rejects[0][0] == "overlap"
    assert "frame 10" in rejects[0][1]


def test_missing_frames_rejected(tmp_path):
    f = tmp_path / "gap.csv"
    f.write_text("platoon_id,vehicle_index,frame,position_m,speed_mps,length_m\n"
                 "p0,0,0,50.0,10.0,4.5\n"
                 "p0,0,2,52.0,10.0,4.5\n"
                 "p0,1,0,30.0,10.0,4.5\n"
                 "p0,1,2,32.0,10.0,4.5\n")
    rejects = []
    assert data.load_trajectories(f, rejects=rejects) == []
    assert "missing frames" in rejects[0][1]


def test_directory_loading(tmp_path):
    a = data.generate_synthetic_platoons(2, n_followers=2, duration_s=3.0, seed=1)
    b = data.generate_synthetic_platoons(2, n_followers=2, duration_s=3.0, seed=2)
    data.write_trajectories(a, tmp_path / "a.csv")
    data.write_trajectories(b, tmp_path / "b.csv")
    records = data.load_trajectories(tmp_path)
    assert len(records) == 4


def test_follower_observation_adapter():
    rec = _tiny_record(T=10)
    obs = data.follower_observation(rec, 1, start=2, stop=8)
    assert len(obs.positions) == 6
    assert obs.lead_length == 4.0
    assert np.array_equal(obs.gaps, rec.gaps()[0, 2:8])
    with pytest.raises(ValueError):
        data.follower_observation(rec, 0)
