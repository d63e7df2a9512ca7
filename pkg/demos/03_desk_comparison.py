"""
Baseline versus two taps on the desk dataset
============================================

Generate the 320-image desk set, train the plain net and the tapped net with
identical backbone initialisation, then compare segmentation metrics.
Takes about fifteen seconds per model.
"""

from imachsr import datagen, netspec, training
from imachsr.netspec import TapCriterion

data = datagen.generate(datagen.desk_spec(seed=7))
train_set, test_set = data.split(datagen.DESK_TRAIN)
print(len(train_set), "train /", len(test_set), "test images")

spec = netspec.preset_spec("desk12", 1, 16, 16, 4)
arms = {"baseline": netspec.NO_TAPS, "two taps": TapCriterion("pattern", count=2)}

for name, crit in arms.items():
    model = netspec.build_model(spec, seed=0, criterion=crit)
    cfg = training.TrainingConfig(epochs=30, batch_size=8, criterion=crit, alpha=0.4, lam=0.1)
    model, records = training.train(cfg, model, train_set)
    tr, te = training.evaluate(model, train_set), training.evaluate(model, test_set)
    print(f"{name:9s} taps={[t.layer_index for t in model.taps]}  final ce {records[-1].loss.ce:.4f}  "
          f"train mIoU {tr['mIoU']:.4f}  test mIoU {te['mIoU']:.4f}  test mF1 {te['mF1']:.4f}")

# per-class view of the last model
for c in te["per_class"]:
    print(c["class"], round(c["iou"], 3), round(c["precision"], 3), round(c["recall"], 3))
