# Data models for the graph-embedding training system
