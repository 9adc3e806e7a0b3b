# Test package for grembed
