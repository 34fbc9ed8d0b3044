"""Line outage detection and localization from voltage-magnitude increments."""

__version__ = "0.1.0"
