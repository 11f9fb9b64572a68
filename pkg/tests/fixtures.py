"""Synthetic on-disk datasets for end-to-end tests."""

from pathlib import Path

import numpy as np

from reidkit.dataset import ImageRecord, Role, write_matrix, write_metadata


def make_reid_fixture(root, n_query=20, n_gallery=200, dim=32, n_cameras=4, seed=7, noise=1.5):
    """Write metadata.csv, query.remb and gallery.remb under ``root``.

    One query per identity; gallery images are spread evenly over the same
    identities and over ``n_cameras`` cameras.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_query, dim))
    records, q_emb, g_emb = [], [], []
    for i in range(n_query):
        records.append(ImageRecord(f"q{i:03d}", i, int(rng.integers(n_cameras)), Role.QUERY))
        q_emb.append(centers[i] + noise * rng.normal(size=dim))
    for j in range(n_gallery):
        ident = j % n_query
        records.append(ImageRecord(f"g{j:04d}", ident, (j // n_query) % n_cameras, Role.GALLERY))
        g_emb.append(centers[ident] + noise * rng.normal(size=dim))
    write_metadata(root / "metadata.csv", records)
    write_matrix(root / "query.remb", np.array(q_emb, dtype=np.float32))
    write_matrix(root / "gallery.remb", np.array(g_emb, dtype=np.float32))
    return root / "metadata.csv", root / "query.remb", root / "gallery.remb"


def write_worked_example(root):
    """Single query whose ranking is T(c1), F, T(c2), F, T(c1)."""
    root = Path(root)
    records = [
        ImageRecord("q", 1, 9, Role.QUERY),
        ImageRecord("a", 1, 1, Role.GALLERY),
        ImageRecord("x", 2, 1, Role.GALLERY),
        ImageRecord("b", 1, 2, Role.GALLERY),
        ImageRecord("y", 3, 2, Role.GALLERY),
        ImageRecord("c", 1, 1, Role.GALLERY),
    ]
    write_metadata(root / "meta.csv", records)
    (root / "ranking.txt").write_text("q:a,x,b,y,c\n", encoding="utf-8")
    return root / "meta.csv", root / "ranking.txt"
