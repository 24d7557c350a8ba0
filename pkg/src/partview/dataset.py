"""On-disk dataset layout: OFF shapes grouped by subcategory plus
train/test split listings.

    <root>/<family>_<subcategory>/<stem>.off[.lbl]
    <root>/train.txt, <root>/test.txt   (relative .off paths, LF)
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .meshes import (
    FAMILIES,
    Mesh,
    family_subcategories,
    generate_shape,
    get_family,
    load_off,
    write_off,
)


@dataclass(frozen=True)
class DatasetEntry:
    shape_id: str      # "<subcategory_dir>/<stem>"
    path: str          # absolute .off path
    subcategory: str
    label: int         # class index into Dataset.classes


@dataclass
class Dataset:
    root: str
    classes: list[str]
    train: list[DatasetEntry]
    test: list[DatasetEntry]
    # part label -> part category for the generating family, when known
    part_categories: dict[int, int] | None


def shape_seed(master_seed: int, subcat_index: int, shape_index: int) -> int:
    ss = np.random.SeedSequence(entropy=(int(master_seed), subcat_index, shape_index))
    return int(ss.generate_state(1)[0])


def generate_dataset(root: str, family: str, shapes_per_subcategory: int,
                     train_fraction: float, seed: int) -> Dataset:
    """Write a full synthetic dataset; deterministic for (family, counts, seed)."""
    subcats = family_subcategories(family)
    train_rel, test_rel = [], []
    for si, sub in enumerate(subcats):
        fam = get_family(family, sub)
        dirname = f"{family}_{sub}"
        os.makedirs(os.path.join(root, dirname), exist_ok=True)
        # at least one shape on each side of the split
        n_train = int(np.ceil(shapes_per_subcategory * train_fraction))
        n_train = max(1, min(n_train, shapes_per_subcategory - 1))
        for i in range(shapes_per_subcategory):
            mesh = generate_shape(fam, shape_seed(seed, si, i))
            stem = f"{dirname}_{i:03d}"
            rel = f"{dirname}/{stem}.off"
            write_off(mesh, os.path.join(root, rel))
            (train_rel if i < n_train else test_rel).append(rel)
    for name, rels in (("train.txt", train_rel), ("test.txt", test_rel)):
        with open(os.path.join(root, name), "w", encoding="utf-8", newline="\n") as fh:
            for rel in rels:
                fh.write(rel + "\n")
    return load_dataset(root)


def _read_split(root: str, name: str) -> list[str]:
    path = os.path.join(root, name)
    if not os.path.exists(path):
        raise DataError(f"missing split listing {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


def load_dataset(root: str) -> Dataset:
    train_rel = _read_split(root, "train.txt")
    test_rel = _read_split(root, "test.txt")
    classes = sorted({rel.split("/")[0] for rel in train_rel + test_rel})
    class_index = {c: i for i, c in enumerate(classes)}

    def entries(rels):
        out = []
        for rel in rels:
            sub = rel.split("/")[0]
            path = os.path.join(root, rel)
            if not os.path.exists(path):
                raise DataError(f"split references missing shape {path}")
            out.append(DatasetEntry(shape_id=rel[:-4], path=path,
                                    subcategory=sub, label=class_index[sub]))
        return out

    # subcategory dirs are "<family>_<sub>"; part categories come from the family
    families = {c.split("_")[0] for c in classes}
    part_categories = None
    if len(families) == 1:
        fam_name = next(iter(families))
        if fam_name in FAMILIES:
            any_sub = next(iter(FAMILIES[fam_name].values()))
            part_categories = dict(any_sub.label_categories)

    return Dataset(root=root, classes=classes, train=entries(train_rel),
                   test=entries(test_rel), part_categories=part_categories)


def load_mesh(entry: DatasetEntry) -> Mesh:
    return load_off(entry.path)


def shape_content_hash(entry: DatasetEntry) -> str:
    h = hashlib.sha256()
    with open(entry.path, "rb") as fh:
        h.update(fh.read())
    lbl = entry.path + ".lbl"
    if os.path.exists(lbl):
        with open(lbl, "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()[:24]
