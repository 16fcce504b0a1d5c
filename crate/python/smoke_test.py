"""Smoke test for the erclust extension module.

Build and install first, e.g. `maturin develop -m crates/py/Cargo.toml`.
"""

import math

import erclust


def main():
    assert abs(erclust.expected_count(4096, 50) - 4096 / 51) < 1e-12
    assert abs(erclust.averaged_term(3, 1000, 50) - 0.997**50) < 1e-12

    feats = [[1.0, 5.0, 5.0], [1.1, -3.0, -3.0]]
    gallery = [[0.0, 0.0, 0.0], [3.0, 3.0, 3.0]]
    table = erclust.rank1_scores(feats, gallery)
    assert table.n_items == 2 and len(table) == 1
    assert table.get(0, 1) == 1.0

    blobs = []
    for k, centre in enumerate([0.0, 10.0, 20.0]):
        for i in range(4):
            blobs.append([centre + 0.01 * i + 0.001 * d for d in range(8)])
    gal = erclust.synth(6, 8, seed=1)
    gal = [[30.0 * v - 5.0 for v in row] for row in gal]
    t = erclust.rank1_scores(blobs, gal)
    fast = t.scores()
    naive = erclust.rank1_scores(blobs, gal, naive=True).scores()
    assert fast == naive
    labels = erclust.cluster(t, 8.0, 7.5)
    assert labels == erclust.transitive_closure(t, 7.5)

    pairs, total = erclust.hungarian_match([[10.0, 9.0], [9.0, 1.0]])
    assert pairs == [(0, 1), (1, 0)] and total == 18.0

    assert erclust.connectivity_curve(2, [0.0, 1.0], 10) == [0.0, 1.0]
    assert abs(erclust.er_threshold(1000, 0.1) - 1.1 * math.log(1000) / 1000) < 1e-15

    dets = [(f, 0.0, 0.0, 10.0, 10.0) for f in list(range(5)) + list(range(10, 15))]
    tracks = erclust.fuse_tracklets(dets)
    assert len(tracks) == 1 and len(tracks[0]) == 15

    counts, upp, upr = erclust.unified_metrics(
        [("valid", "a", 0), ("valid", "a", 0), ("fp", None, 0), ("fn", "a", None)]
    )
    assert counts["green"] == 3 and counts["red"] == 3
    assert (upp, upr) == (0.25, 0.25)
    assert abs(erclust.f_alpha(0.5, 1.0, 0.5) - 2 / 3) < 1e-12

    print("erclust", erclust.__version__, "smoke test ok")


if __name__ == "__main__":
    main()
