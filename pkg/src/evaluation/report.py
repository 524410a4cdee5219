"""
Evaluation report: per-level AP tables, seen/unseen mIoU, hIoU, NovelAP and
the Oracle-Obj part AP, with JSON and flat CSV writers and a printed summary.
"""

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

from src.evaluation.coco_map import MapResult


@dataclass(frozen=True)
class NovelAP:
    """Mask AP over the novel part categories of one evaluation split."""

    value: float
    category_ids: Tuple[int, ...]
    split_key: str = ""


def novel_ap_increment(baseline: Union[NovelAP, float], augmented: Union[NovelAP, float]) -> float:
    """augmented − baseline.

    Raises:
        ValueError: if the two numbers were computed on different novel splits
    """
    if isinstance(baseline, NovelAP) and isinstance(augmented, NovelAP):
        if baseline.category_ids != augmented.category_ids or baseline.split_key != augmented.split_key:
            raise ValueError(
                f"NovelAP values come from different splits: {baseline.split_key or baseline.category_ids} "
                f"vs {augmented.split_key or augmented.category_ids}"
            )
    base = baseline.value if isinstance(baseline, NovelAP) else float(baseline)
    aug = augmented.value if isinstance(augmented, NovelAP) else float(augmented)
    return aug - base


@dataclass
class EvalReport:
    object_box: MapResult = field(default_factory=MapResult)
    object_mask: MapResult = field(default_factory=MapResult)
    part_box: MapResult = field(default_factory=MapResult)
    part_mask: MapResult = field(default_factory=MapResult)
    miou_seen: Optional[float] = None
    miou_unseen: Optional[float] = None
    hiou: Optional[float] = None
    novel_ap: Optional[NovelAP] = None
    oracle_part_box: Optional[MapResult] = None
    oracle_part_mask: Optional[MapResult] = None
    category_names: Dict[int, str] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        """Metrics scaled to [0, 100]."""
        data = {
            "object": {"box": self.object_box.to_dict(), "mask": self.object_mask.to_dict()},
            "part": {"box": self.part_box.to_dict(), "mask": self.part_mask.to_dict()},
            "miou_seen": self.miou_seen,
            "miou_unseen": self.miou_unseen,
            "hiou": self.hiou,
            "novel_ap": None,
            "oracle_part": None,
            "category_names": {str(k): v for k, v in self.category_names.items()},
        }
        if self.novel_ap is not None:
            data["novel_ap"] = {
                "value": self.novel_ap.value,
                "category_ids": list(self.novel_ap.category_ids),
                "split_key": self.novel_ap.split_key,
            }
        if self.oracle_part_box is not None:
            data["oracle_part"] = {
                "box": self.oracle_part_box.to_dict(),
                "mask": self.oracle_part_mask.to_dict() if self.oracle_part_mask else None,
            }
        return data

    def rows(self) -> List[Dict]:
        """Flat (setting, level, iou_type, category, metric, value) rows for plotting."""
        out = []
        settings = [
            ("free", "object", "box", self.object_box),
            ("free", "object", "mask", self.object_mask),
            ("free", "part", "box", self.part_box),
            ("free", "part", "mask", self.part_mask),
        ]
        if self.oracle_part_box is not None:
            settings.append(("oracle", "part", "box", self.oracle_part_box))
        if self.oracle_part_mask is not None:
            settings.append(("oracle", "part", "mask", self.oracle_part_mask))
        for setting, level, iou_type, result in settings:
            out.append(_row(setting, level, iou_type, "all", "AP", result.ap * 100))
            out.append(_row(setting, level, iou_type, "all", "AP50", result.ap50 * 100))
            for cid, vals in sorted(result.per_category.items()):
                name = self.category_names.get(cid, str(cid))
                for metric, value in vals.items():
                    out.append(_row(setting, level, iou_type, name, metric, value * 100))
        for metric in ("miou_seen", "miou_unseen", "hiou"):
            value = getattr(self, metric)
            if value is not None:
                out.append(_row("free", "part", "mask", "all", metric, value))
        if self.novel_ap is not None:
            out.append(_row("free", "part", "mask", "novel", "NovelAP", self.novel_ap.value))
        return out

    def write(self, out_dir: str) -> Tuple[str, str]:
        """Write eval_report.json and eval_report.csv; returns both paths."""
        os.makedirs(out_dir, exist_ok=True)
        json_path = os.path.join(out_dir, "eval_report.json")
        csv_path = os.path.join(out_dir, "eval_report.csv")
        with open(json_path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
        with open(csv_path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(ROW_FIELDS))
            writer.writeheader()
            writer.writerows(self.rows())
        return json_path, csv_path

    def print_summary(self):
        print("\n" + "=" * 60)
        print("EVALUATION REPORT")
        print("=" * 60)
        print(f"{'Level':<10} {'IoU':<6} {'AP':>8} {'AP50':>8}")
        print("-" * 60)
        for level, iou_type, result in (
            ("object", "box", self.object_box),
            ("object", "mask", self.object_mask),
            ("part", "box", self.part_box),
            ("part", "mask", self.part_mask),
        ):
            print(f"{level:<10} {iou_type:<6} {result.ap * 100:>8.2f} {result.ap50 * 100:>8.2f}")
        if self.oracle_part_box is not None:
            print("-" * 60)
            print(f"{'oracle':<10} {'box':<6} {self.oracle_part_box.ap * 100:>8.2f} {self.oracle_part_box.ap50 * 100:>8.2f}")
            if self.oracle_part_mask is not None:
                print(
                    f"{'oracle':<10} {'mask':<6} {self.oracle_part_mask.ap * 100:>8.2f} "
                    f"{self.oracle_part_mask.ap50 * 100:>8.2f}"
                )
        print("-" * 60)
        print(f"mIoU seen:   {_fmt(self.miou_seen)}")
        print(f"mIoU unseen: {_fmt(self.miou_unseen)}")
        print(f"hIoU:        {_fmt(self.hiou)}")
        if self.novel_ap is not None:
            print(f"NovelAP:     {self.novel_ap.value:.2f}")
        print("=" * 60)


ROW_FIELDS = ("setting", "level", "iou_type", "category", "metric", "value")


def _row(setting, level, iou_type, category, metric, value) -> Dict:
    return dict(zip(ROW_FIELDS, (setting, level, iou_type, category, metric, round(float(value), 6))))


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.2f}"
