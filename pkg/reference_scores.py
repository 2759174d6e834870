"""
Published reference scores on the ZeroWaste-f splits, used to print
measured-vs-reference comparisons next to our own tables
"""
from typing import Dict, Literal

from metrics import MetricsReport, SplitMetrics

# (train, valid, test)
BASELINE_IOU = {
    "UNet": (0.7011, 0.7724, 0.8065),
    "UNet++": (0.6577, 0.7480, 0.7798),
    "MANet": (0.6373, 0.6966, 0.7324),
    "LinkNet": (0.5560, 0.5941, 0.6608),
    "FPN": (0.7738, 0.7687, 0.7953),
    "PSPNet": (0.7348, 0.7392, 0.7715),
    "PAN": (0.7310, 0.7162, 0.7473),
}

BASELINE_DICE_LOSS = {
    "UNet": (0.3829, 0.2273, 0.2084),
    "UNet++": (0.3966, 0.2481, 0.2308),
    "MANet": (0.3469, 0.2334, 0.2080),
    "LinkNet": (0.4525, 0.3830, 0.2080),
    "FPN": (0.1316, 0.1351, 0.1183),
    "PSPNet": (0.1634, 0.1565, 0.1349),
    "PAN": (0.1835, 0.1754, 0.1577),
}

ENSEMBLE_IOU = {
    "EL-0": (0.8531, 0.7910, 0.8147),
    "EL-1": (0.8594, 0.8041, 0.8196),
    "EL-2": (0.8681, 0.8025, 0.8282),
    "EL-3": (0.8778, 0.8058, 0.8235),
    "EL-4": (0.8802, 0.8091, 0.8306),
}

ENSEMBLE_DICE_LOSS = {
    "EL-0": (0.08279, 0.1211, 0.1068),
    "EL-1": (0.07901, 0.1126, 0.1034),
    "EL-2": (0.07379, 0.1133, 0.0977),
    "EL-3": (0.06846, 0.1114, 0.1012),
    "EL-4": (0.06713, 0.1092, 0.09019),
}

_SPLITS = ("train", "valid", "test")


def reference_reports(family: Literal["baseline", "ensemble"]) -> Dict[str, MetricsReport]:
    """Published IoU and Dice loss as reports (other fields left empty)"""
    ious, dices = (BASELINE_IOU, BASELINE_DICE_LOSS) if family == "baseline" else (ENSEMBLE_IOU, ENSEMBLE_DICE_LOSS)
    return {
        name: MetricsReport(
            model=name,
            per_split={
                split: SplitMetrics(iou=ious[name][i], dice_loss=dices[name][i])
                for i, split in enumerate(_SPLITS)
            },
        )
        for name in ious
    }
