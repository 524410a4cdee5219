# Config loading, logging setup and overlay rendering
