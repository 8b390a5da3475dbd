"""Window curriculum, distillation objective and the synthetic experiment rig."""
