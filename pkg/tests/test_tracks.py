from dataclasses import replace

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from globalsfm.ingest import ImageRecord, TwoViewModel, assemble_graph
from globalsfm.synth import SynthConfig, generate_scene
from globalsfm.tracks import build_tracks, complete_matches

H = TwoViewModel("H", np.eye(3), 4)


def _graph(n_images, matches):
    """``matches`` is ``{(i, j): [(k1, k2), ...]}``; keypoint k of any image sits at (k, k)."""
    images = [ImageRecord(i, str(i), 100, 100, 1) for i in range(n_images)]
    raw = []
    for index, ((i, j), kk) in enumerate(sorted(matches.items())):
        pts = np.array([[a, a, b, b] for a, b in kk], np.float32)
        raw.append((index, i, j, H, pts))
    return assemble_graph(images, raw)


def _members(tracks):
    return [set(t.members) for t in tracks]


def test_transitive_track():
    g = _graph(3, {(0, 1): [(1, 1)], (1, 2): [(1, 1)]})
    t = build_tracks(g)
    assert _members(t) == [{(0, 0), (1, 0), (2, 0)}]


def test_inconsistent_track_dropped():
    g = _graph(2, {(0, 1): [(1, 1), (2, 1)]})
    t = build_tracks(g)
    assert len(t) == 0 and t.n_discarded == 1


def test_completion_creates_pair():
    g = _graph(3, {(0, 1): [(1, 1)], (1, 2): [(1, 1)]})
    out = complete_matches(g, build_tracks(g))
    new = [p for p in out.pairs if (p.i, p.j) == (0, 2)]
    assert len(new) == 1 and new[0].model is None
    assert new[0].synthetic.all() and list(new[0].kp1) == [0] and list(new[0].kp2) == [0]


def test_completion_skips_two_view_tracks():
    g = _graph(2, {(0, 1): [(1, 1), (2, 2)]})
    assert complete_matches(g, build_tracks(g)) is g


def test_completion_respects_size_cap():
    g = _graph(3, {(0, 1): [(1, 1)], (1, 2): [(1, 1)]})
    assert complete_matches(g, build_tracks(g), max_track_size=2) is g


def test_synth_tracks_are_pure(clean_scene):
    g = clean_scene.graph
    t = build_tracks(g)
    assert len(t) > 0
    for track in t:
        labels = {clean_scene.keypoint_labels[i][k] for i, k in track.members}
        assert len(labels) == 1 and -1 not in labels


def test_completion_recovers_deleted_matches():
    scene = generate_scene(SynthConfig(n_cameras=12, n_points=800, seed=9, match_dropout=0.0, quantize=False))
    g = scene.graph
    rng = np.random.default_rng(0)
    deleted, pairs = set(), []
    for p in g.pairs:
        drop = rng.random(len(p)) < 0.3
        deleted |= {(p.i, a, p.j, b) for a, b in zip(p.kp1[drop], p.kp2[drop])}
        keep = ~drop
        pairs.append(replace(p, kp1=p.kp1[keep], kp2=p.kp2[keep], points1=p.points1[keep],
                             points2=p.points2[keep], active=p.active[keep], synthetic=p.synthetic[keep]))
    thinned = g.with_pairs(pairs)
    tracks = build_tracks(thinned)
    look = tracks.lookup()
    intra = {d for d in deleted if look.get((d[0], d[1]), -1) == look.get((d[2], d[3]), -2)}
    assert len(intra) > 0.5 * len(deleted)
    done = complete_matches(thinned, tracks)
    have = {(p.i, a, p.j, b) for p in done.pairs for a, b in zip(p.kp1, p.kp2)}
    assert len(intra & have) >= 0.95 * len(intra)


edges = st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3), st.integers(0, 4), st.integers(0, 4)),
                 min_size=1, max_size=25)


@settings(max_examples=80, deadline=None)
@given(edges)
def test_tracks_pure_and_completion_idempotent(raw):
    matches = {}
    for i, j, a, b in raw:
        if i == j:
            continue
        key = (min(i, j), max(i, j))
        pair = (a, b) if i < j else (b, a)
        if pair not in matches.setdefault(key, []):
            matches[key].append(pair)
    if not matches:
        return
    g = _graph(4, matches)
    t = build_tracks(g)
    for track in t:
        ims = [i for i, _ in track.members]
        assert len(ims) == len(set(ims)) and len(ims) >= 2
    once = complete_matches(g, t)
    twice = complete_matches(once, build_tracks(once))
    assert sum(len(p) for p in twice.pairs) == sum(len(p) for p in once.pairs)
    # completion never merges or splits tracks
    assert _members(build_tracks(once)) == _members(t)
