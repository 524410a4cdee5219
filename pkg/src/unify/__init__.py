# Dataset unification procedures
