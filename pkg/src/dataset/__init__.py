# Hierarchical annotation schema
