# Domain services: evidence, losses, fusion, model, data, metrics, training
