# grembed: distributed asynchronous graph-embedding training
