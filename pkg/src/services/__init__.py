"""Saliency, evaluation, fine-tuning and persistence services"""
