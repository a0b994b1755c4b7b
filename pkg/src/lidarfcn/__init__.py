"""Vehicle detection on 3D lidar range scans.

Pipeline: project a point cloud to a 2-channel (d, z) point map, run a
fully convolutional network predicting per-point objectness and a
rotation-invariant 24-d bounding box encoding, decode and cluster the
candidates with neighbor-count non-max suppression, and score detections
with AP / AOS.
"""

__version__ = "0.1.0"
