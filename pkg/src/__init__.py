# Hierarchical part parsing package
