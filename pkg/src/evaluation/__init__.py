# Metrics and evaluation protocols
