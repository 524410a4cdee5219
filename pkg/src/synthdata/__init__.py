# Synthetic scene corpora
