# Core Package: geometry, representation, losses and NMS
