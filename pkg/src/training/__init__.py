# Training loop and gradient checks
