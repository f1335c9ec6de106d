#!/usr/bin/env python3
"""Turn a REFER-style dataset directory into the JSON read by `refseg convert-dataset`.

Expects the usual layout, e.g. refcoco/refs(unc).p and refcoco/instances.json.
Polygon segmentations are rasterised with pycocotools and written as
uncompressed column-major RLE.

    python scripts/refer_to_json.py --data-root refer/data --dataset refcocog \
        --split-by umd --out refcocog_umd.json
    refseg convert-dataset --input refcocog_umd.json --images-dir coco/train2014 \
        --out data/refcocog/manifest.jsonl --split val_u
"""

import argparse
import json
import os
import pickle
import sys

import numpy as np
from pycocotools import mask as mask_utils

SPLIT_NAMES = {
    ("umd", "val"): "val_u",
    ("umd", "test"): "test_u",
    ("google", "val"): "test_g",
}
KEEP = {"val", "testA", "testB", "val_u", "test_u", "test_g"}


def uncompressed_counts(binary):
    flat = np.asarray(binary, dtype=np.uint8).flatten(order="F")
    counts = []
    current, run = 0, 0
    for v in flat:
        if v == current:
            run += 1
        else:
            counts.append(run)
            current, run = v, 1
    counts.append(run)
    return counts


def to_rle(segmentation, height, width):
    if isinstance(segmentation, list):
        rles = mask_utils.frPyObjects(segmentation, height, width)
        binary = mask_utils.decode(mask_utils.merge(rles))
    elif isinstance(segmentation.get("counts"), list):
        return {"size": [height, width], "counts": segmentation["counts"]}
    else:
        binary = mask_utils.decode(segmentation)
    return {"size": [height, width], "counts": uncompressed_counts(binary)}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--data-root", required=True)
    ap.add_argument("--dataset", required=True, choices=["refcoco", "refcoco+", "refcocog"])
    ap.add_argument("--split-by", default=None, help="unc (default for refcoco/+), umd or google")
    ap.add_argument("--out", required=True)
    args = ap.parse_args()

    split_by = args.split_by or ("umd" if args.dataset == "refcocog" else "unc")
    base = os.path.join(args.data_root, args.dataset)
    with open(os.path.join(base, f"refs({split_by}).p"), "rb") as f:
        refs = pickle.load(f)
    with open(os.path.join(base, "instances.json")) as f:
        instances = json.load(f)

    images = {im["id"]: im for im in instances["images"]}
    anns = {a["id"]: a for a in instances["annotations"]}

    out_refs, used_anns, used_images = [], set(), set()
    for ref in refs:
        split = SPLIT_NAMES.get((split_by, ref["split"]), ref["split"])
        if split not in KEEP:
            continue
        out_refs.append({
            "ref_id": ref["ref_id"],
            "ann_id": ref["ann_id"],
            "image_id": ref["image_id"],
            "split": split,
            "sentences": [{"sent_id": s["sent_id"], "sent": s["sent"]} for s in ref["sentences"]],
        })
        used_anns.add(ref["ann_id"])
        used_images.add(ref["image_id"])

    out_images = [
        {"id": i, "file_name": images[i]["file_name"], "width": images[i]["width"], "height": images[i]["height"]}
        for i in sorted(used_images)
    ]
    out_anns = []
    for a in sorted(used_anns):
        ann = anns[a]
        im = images[ann["image_id"]]
        out_anns.append({
            "id": a,
            "image_id": ann["image_id"],
            "segmentation": to_rle(ann["segmentation"], im["height"], im["width"]),
        })

    with open(args.out, "w") as f:
        json.dump({"images": out_images, "annotations": out_anns, "refs": out_refs}, f)
    print(f"{len(out_refs)} refs, {sum(len(r['sentences']) for r in out_refs)} sentences", file=sys.stderr)


if __name__ == "__main__":
    main()
