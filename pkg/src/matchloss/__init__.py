# Matching and training objective
