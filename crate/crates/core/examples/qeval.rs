// scores a checkpoint at quarter resolution: qeval <ckpt> <data_root> <split>
use pks_core::train::{self, Purpose};
use pks_core::{checkpoint, dataset};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = checkpoint::load(std::path::Path::new(&args[1])).unwrap();
    let mut cfg = ckpt.config.clone();
    cfg.data_root = args[2].clone().into();
    let raw = dataset::read_split(&cfg.data_root, &args[3]).unwrap();
    let prepared = train::prepare_samples(&cfg, &raw, Purpose::Eval).unwrap();
    let report = train::evaluate_samples(&ckpt.params, &cfg, &prepared).unwrap();
    let mut ious: Vec<(f64, String)> =
        report.samples.iter().map(|s| (s.iou, s.id.clone())).collect();
    ious.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    for (v, id) in ious.iter().take(6) {
        println!("worst {id}  iou={v:.3}");
    }
    println!("mIoU {:.4}  prec@0.5 {:.3}  prec@0.9 {:.3}", report.miou, report.prec_50, report.prec_90);
}
