"""Two-view keypoint-fusion 6D pose estimation with synthetic oracles."""
