# Numerical modules: geometry, synthetic world, audio features, models, losses and metrics
