import numpy as np

from dectrack.core import Detection, Keypoint, TorsoKeypoints


def kp(rs, ls, rh, lh) -> TorsoKeypoints:
    return TorsoKeypoints(*(Keypoint(*p) for p in (rs, ls, rh, lh)))


# a person facing away from the camera: right shoulder on the image right
FACING_AWAY = kp((60, 20, 1), (40, 20, 1), (58, 70, 1), (42, 70, 1))


def det(frame, box, emb, *, sensor=0, keypoints=FACING_AWAY, gt_id=None) -> Detection:
    return Detection(sensor, frame, tuple(box), np.asarray(emb, dtype=float), keypoints, gt_id)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def criterion(number: int, title: str, ok: bool, detail: str = "") -> None:
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line
