"""RGB-D inertial odometry for dynamic environments.

Pipeline: IMU-aided masked feature tracking with grid-based FAST detection,
detection-box + depth dynamic feature recognition with missed-detection
compensation and a moving-consistency check, and a sliding-window
visual-inertial estimator. Includes a deterministic scene simulator, TUM-style
dataset ingestion, and ATE/RPE/CR evaluation.
"""

__version__ = "0.1.0"
