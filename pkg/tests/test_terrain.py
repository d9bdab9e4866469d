import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracle_guided.exceptions import InfeasibleLayout, OutOfRange
from oracle_guided.terrain import (
    ModeParamRanges,
    ModeSpec,
    Segment,
    TerrainWindow,
    Track,
    active_mode,
    bridge_gaps,
    generate_track,
    height_at,
    mode_sequence,
    sample_mode_params,
    single_obstacle_track,
    terrain_scan,
)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([0.0, 0.1, 0.2, 0.3]))
def test_generated_tracks_respect_layout(seed, density):
    ranges = ModeParamRanges()
    track = generate_track(seed, ranges, length=10.0, obstacle_density=density)
    assert len(track.obstacles) == round(density * 10)
    assert track.segments[0].kind == "flat" and track.segments[0].w >= 1.0 - 1e-9
    assert track.segments[-1].kind == "flat"
    for a, b in zip(track.segments, track.segments[1:]):
        assert not (a.is_obstacle and b.is_obstacle)
        assert b.start_x == pytest.approx(a.end_x)
    for seg in track.obstacles:
        if seg.kind == "block":
            assert ranges.contains(ModeSpec("jump", w=seg.w, h=seg.h))
        else:
            assert ranges.contains(ModeSpec("leap", w=seg.w, d=seg.d))
    assert generate_track(seed, ranges, 10.0, density) == track


def test_infeasible_layout():
    with pytest.raises(InfeasibleLayout):
        generate_track(0, length=3.0, obstacle_density=1.0)


def test_kinds_filter():
    track = generate_track(3, length=10.0, obstacle_density=0.3, kinds=("gap",))
    assert {s.kind for s in track.obstacles} == {"gap"}


def test_height_queries():
    track = single_obstacle_track("gap", 0.3, 0.5, start=2.0)
    assert height_at(track, 1.0) == (0.0, False)
    assert height_at(track, 2.1) == (-0.5, True)
    with pytest.raises(OutOfRange):
        height_at(track, -0.1)
    block = single_obstacle_track("block", 0.2, 0.1, start=1.0)
    assert height_at(block, 1.1) == (0.1, False)


def test_track_validation():
    with pytest.raises(ValueError):
        Track((Segment("flat", 0.0, 1.0), Segment("flat", 1.5, 1.0)), 2.5)
    with pytest.raises(ValueError):
        Segment("block", 0.0, 0.2, h=0.0)
    with pytest.raises(ValueError):
        Segment("lava", 0.0, 1.0)


def test_active_mode_lookahead():
    track = single_obstacle_track("block", 0.2, 0.1, start=2.0)
    assert active_mode(track, 0.0, 1.0).mode == "pace"
    spec = active_mode(track, 1.2, 1.0, v=0.6)
    assert (spec.mode, spec.w, spec.h, spec.v) == ("jump", 0.2, 0.1, 0.6)
    assert active_mode(track, 2.5, 1.0).mode == "pace"
    assert [m.mode for m in mode_sequence(track)] == ["pace", "jump", "pace"]


def test_scan_is_relative_to_base():
    track = single_obstacle_track("block", 0.5, 0.1, start=1.0)
    scan = terrain_scan(track, 0.5, n_points=10, span=1.0)
    assert scan.shape == (10,)
    assert np.allclose(scan[:4], 0.0)
    assert np.allclose(scan[4:9], 0.1)
    assert scan[9] == 0.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-1, 1), st.booleans()), min_size=1, max_size=40))
def test_bridge_gaps_property(cells):
    heights = np.array([c[0] for c in cells])
    gaps = np.array([c[1] for c in cells])
    out = bridge_gaps(heights, gaps)
    assert np.array_equal(out[~gaps], heights[~gaps])
    last = 0.0
    for h, g, o in zip(heights, gaps, out):
        if not g:
            last = h
        else:
            assert o == last


def test_window_ground_bridges_gaps():
    track = single_obstacle_track("gap", 0.3, 0.5, start=1.0)
    win = TerrainWindow.from_track(track, 0.0, 3.0)
    assert win.height(1.1) == -0.5 and win.is_gap(1.1)
    assert win.ground(1.1) == 0.0
    assert win.obstacles()[0][0] == "gap"


def test_sampling_and_boxes():
    ranges = ModeParamRanges()
    rng = np.random.default_rng(0)
    for mode in ("pace", "jump", "leap"):
        spec = sample_mode_params(rng, ranges, mode)
        assert ranges.contains(spec)
    box = ranges.test_box()
    assert box.jump_h == pytest.approx((ranges.jump_h[0] / 1.5, ranges.jump_h[1] * 1.5))
    assert not ranges.contains(ModeSpec("jump", w=0.2, h=box.jump_h[1]))
    with pytest.raises(ValueError):
        ModeParamRanges(dilation=0.5)
    with pytest.raises(ValueError):
        ModeParamRanges(pace_v=(1.0, 0.5))
