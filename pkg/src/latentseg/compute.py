"""Parameter and multiply-accumulate accounting for the two pipelines.

MACs cover convolutions (``Cout*Cin*k*k*Hout*Wout``) and the batched matrix
products of the graph head; elementwise ops, pooling and resizing are free.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .codec import CodecPair
from .nn import Module
from .segmentation import SegNet
from .tensor import Tensor, mac_counter, no_grad


def count_params(net: Module | None) -> int:
    return 0 if net is None else net.num_parameters()


def count_macs(net: Module | None, input_shape: tuple[int, ...]) -> int:
    """MACs of one forward pass on a zero input of ``input_shape``."""
    if net is None:
        return 0
    with no_grad(), mac_counter() as box:
        net(Tensor(np.zeros(input_shape, np.float32)))
    return box[0]


def conv_macs(cin: int, cout: int, k: int, hout: int, wout: int) -> int:
    return cout * cin * k * k * hout * wout


@dataclass
class StageCost:
    params: int
    macs: int


PIPELINES = ("proposed", "BL1", "BL2", "BL3")
STAGES = ("net_C", "net_D", "net_seg_E", "net_seg_D")
# which stages run at the edge (vehicle) and which in the cloud
_LAYOUT = {
    "proposed": (("net_C",), ("net_seg_D_latent",)),
    "BL1": ((), ("net_seg_E", "net_seg_D")),
    "BL2": (("net_C",), ("net_D", "net_seg_E", "net_seg_D")),
    "BL3": (("net_C",), ("net_D", "net_seg_E", "net_seg_D")),
}


@dataclass
class ComputeReport:
    stages: dict[str, StageCost]
    image_shape: tuple[int, int]

    def edge_macs(self, pipeline: str) -> int:
        return sum(self.stages[s].macs for s in _LAYOUT[pipeline][0])

    def cloud_macs(self, pipeline: str) -> int:
        return sum(self.stages[s].macs for s in _LAYOUT[pipeline][1])

    def total_macs(self, pipeline: str) -> int:
        return self.edge_macs(pipeline) + self.cloud_macs(pipeline)

    def total_params(self, pipeline: str) -> int:
        names = _LAYOUT[pipeline][0] + _LAYOUT[pipeline][1]
        return sum(self.stages[s].params for s in names)

    def saving_pct(self, baseline: str = "BL3", scope: str = "total") -> float:
        """Percentage by which the proposed pipeline undercuts ``baseline``."""
        get = self.total_macs if scope == "total" else self.cloud_macs
        base = get(baseline)
        return 100.0 * (base - get("proposed")) / base if base else 0.0

    def rows(self) -> list[dict]:
        out = []
        for p in PIPELINES:
            seg_d = "net_seg_D_latent" if p == "proposed" else "net_seg_D"
            used = set(_LAYOUT[p][0] + _LAYOUT[p][1])
            row = {"pipeline": p}
            for label, key in zip(STAGES, ("net_C", "net_D", "net_seg_E", seg_d)):
                cost = self.stages[key] if key in used else StageCost(0, 0)
                row[f"{label}_params"] = cost.params
                row[f"{label}_macs"] = cost.macs
            row.update(
                edge_macs=self.edge_macs(p),
                cloud_macs=self.cloud_macs(p),
                total_macs=self.total_macs(p),
                saving_vs_pipeline_pct=round(self.saving_pct(p), 4) if p != "proposed" else 0.0,
            )
            out.append(row)
        return out


REPORT_COLUMNS = (
    ["pipeline"]
    + [f"{s}_{k}" for s in STAGES for k in ("params", "macs")]
    + ["edge_macs", "cloud_macs", "total_macs", "saving_vs_pipeline_pct"]
)


def pipeline_report(codec: CodecPair, seg_latent: SegNet, seg_image: SegNet,
                    image_shape: tuple[int, int]) -> ComputeReport:
    """Per-stage costs for one image of ``image_shape`` (H, W).

    ``codec.decompressor`` may be ``None`` (counted as zero cost).
    """
    h, w = image_shape
    c, lh, lw = codec.config.latent_shape(h, w)
    latent = (1, c, lh, lw)
    stages = {
        "net_C": StageCost(count_params(codec.compressor), count_macs(codec.compressor, (1, 3, h, w))),
        "net_D": StageCost(count_params(codec.decompressor), count_macs(codec.decompressor, latent)),
        "net_seg_E": StageCost(count_params(seg_image.encoder), count_macs(seg_image.encoder, (1, 3, h, w))),
        "net_seg_D": StageCost(count_params(seg_image.decoder), count_macs(seg_image.decoder, latent)),
        "net_seg_D_latent": StageCost(count_params(seg_latent.decoder), count_macs(seg_latent.decoder, latent)),
    }
    return ComputeReport(stages, (h, w))


def write_report_csv(path: str | os.PathLike, report: ComputeReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(report.rows())
