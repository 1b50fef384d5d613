"""Input checks shared by the estimators."""
import numpy as np

from .exceptions import InvalidParameterError, StructuralError
from .model import CvParams
from .simulator import GroundTruth, ObservationScan


def check_scans(scans, dy=2, allow_empty=False):
    """Return a list of :class:`ObservationScan` with consecutive times.

    Accepts scans or plain ``(k_y, dy)`` arrays (times are then 1, 2, ...).
    """
    if scans is None:
        raise InvalidParameterError("no scans given")
    out = []
    for k, s in enumerate(scans, start=1):
        if isinstance(s, ObservationScan):
            pts = np.asarray(s.points, float)
            t = s.t
        else:
            pts = np.asarray(s, float)
            t = k
        if pts.size == 0:
            pts = pts.reshape(0, dy)
        if pts.ndim != 2 or pts.shape[1] != dy:
            raise InvalidParameterError(f"scan {k} has shape {pts.shape}, expected (k_y, {dy})")
        if not np.isfinite(pts).all():
            raise InvalidParameterError(f"scan {k} contains non-finite values")
        out.append(ObservationScan(t, pts))
    if not out and not allow_empty:
        raise InvalidParameterError("scan sequence is empty")
    return out


def check_truth(truth, scans):
    """Validate ground-truth records against the scans they explain."""
    if not isinstance(truth, GroundTruth):
        raise InvalidParameterError("truth must be a GroundTruth")
    if len(truth) != len(scans):
        raise StructuralError(f"truth has {len(truth)} steps, scans have {len(scans)}")
    k_prev = 0
    for rec, s in zip(truth.records, scans):
        rec.validate(k_prev=k_prev, k_y=s.k_y)
        k_prev = rec.k_x
    return truth


def check_cv(theta0):
    if isinstance(theta0, CvParams):
        return theta0
    if isinstance(theta0, dict):
        return CvParams.from_dict(theta0)
    raise InvalidParameterError("theta0 must be CvParams or a parameter dict")
