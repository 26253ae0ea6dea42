"""Pinhole camera rig shared by the simulator, the odometry and verification.

The body frame is x-forward, y-left, z-up. Camera 0 looks along body +x with
its image x axis along body -y and image y axis along body -z. Camera 1 (when
a stereo baseline is configured) sits ``baseline`` metres along camera 0's
image x axis with identical orientation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vislam.geometry import Pose, matrix_to_quat

# camera axes expressed in the body frame, as columns
R_BODY_CAM = np.array([[0.0, 0.0, 1.0],
                       [-1.0, 0.0, 0.0],
                       [0.0, -1.0, 0.0]])


@dataclass(frozen=True)
class PinholeCamera:
    fx: float = 400.0
    fy: float = 400.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def image_area(self):
        return float(self.width * self.height)

    def project(self, pc):
        """Project camera-frame points (n, 3) to pixels (n, 2)."""
        pc = np.atleast_2d(pc)
        z = pc[:, 2]
        return np.stack([self.fx * pc[:, 0] / z + self.cx, self.fy * pc[:, 1] / z + self.cy], axis=1)

    def in_image(self, uv):
        uv = np.atleast_2d(uv)
        return ((uv[:, 0] >= 0.0) & (uv[:, 0] < self.width)
                & (uv[:, 1] >= 0.0) & (uv[:, 1] < self.height))

    def bearings(self, uv):
        """Unit bearing vectors for pixels (n, 2)."""
        uv = np.atleast_2d(uv)
        b = np.stack([(uv[:, 0] - self.cx) / self.fx, (uv[:, 1] - self.cy) / self.fy,
                      np.ones(len(uv))], axis=1)
        return b / np.linalg.norm(b, axis=1, keepdims=True)


DEFAULT_CAMERA = PinholeCamera()


def body_T_cam(camera_index=0, baseline=0.0):
    """Extrinsic pose of camera ``camera_index`` in the body frame."""
    offset = R_BODY_CAM @ np.array([baseline * camera_index, 0.0, 0.0])
    return Pose(matrix_to_quat(R_BODY_CAM), offset)


def rig_extrinsics(baseline):
    """List of (R_BC, t_BC) for all cameras of the rig."""
    n = 2 if baseline > 0 else 1
    return [(R_BODY_CAM.copy(), R_BODY_CAM @ np.array([baseline * c, 0.0, 0.0])) for c in range(n)]
