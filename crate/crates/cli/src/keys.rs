//! Documentation of every config key and its default, rendered into `--help`.

/// `(key, default as JSON, reference default, description)`.
pub const CONFIG_KEYS: &[(&str, &str, bool, &str)] = &[
    ("version", "1", false, "config schema version"),
    ("seed", "0", false, "run seed; every random stream derives from it"),
    ("data.blobs.num_classes", "4", false, "number of classes K"),
    ("data.blobs.n", "4000", false, "size of the synthetic training pool"),
    ("data.blobs.dim", "2", false, "input dimension"),
    (
        "data.blobs.separation",
        "2.0",
        false,
        "radius of the class means in cluster std units",
    ),
    ("data.blobs.label_noise", "0.1", false, "fraction of flipped labels"),
    ("data.test_n", "4000", false, "size of the separately drawn test set"),
    ("data.seed", "null", false, "data seed; the run seed when null"),
    (
        "data.splits",
        "[0.8,0.1,0.1]",
        true,
        "train / validation / meta-validation fractions",
    ),
    ("data.train_csv", "null", false, "training pool CSV instead of blobs"),
    ("data.test_csv", "null", false, "test CSV, required with data.train_csv"),
    ("model.hidden", "[64,64]", false, "hidden layer widths"),
    ("optim.epochs", "60", false, "training epochs"),
    ("optim.batch_size", "128", true, "minibatch size"),
    ("optim.lr", "0.1", true, "SGD learning rate"),
    ("optim.momentum", "0.9", true, "SGD momentum"),
    ("optim.weight_decay", "0.0005", true, "SGD weight decay"),
    (
        "optim.lr_drops",
        "[25,40]",
        false,
        "epochs at which the learning rate drops",
    ),
    (
        "optim.lr_drop_factor",
        "0.1",
        true,
        "learning-rate multiplier at each drop",
    ),
    (
        "loss.kind",
        "\"ce\"",
        false,
        "ce | brier | focal | flsd53 | label_smoothing | ce_plus_dece | ce_plus_mmce",
    ),
    ("loss.focal_gamma", "3.0", true, "focal loss gamma"),
    ("loss.ls_value", "0.05", true, "fixed label smoothing"),
    ("loss.dece_weight", "1.0", false, "DECE weight in ce_plus_dece"),
    ("loss.mmce_weight", "1.0", false, "MMCE weight in ce_plus_mmce"),
    ("meta.enabled", "false", false, "meta-learn omega"),
    ("meta.objective", "\"dece\"", true, "dece | ce | mmce | dece_plus_ce"),
    (
        "meta.hyper",
        "\"ls_vector\"",
        false,
        "ls_scalar | ls_vector | l2_unitwise",
    ),
    ("meta.lr", "0.001", true, "Adam learning rate for omega"),
    ("meta.stride", "1", false, "base steps per meta update"),
    ("meta.ce_weight", "1.0", false, "CE weight in dece_plus_ce"),
    ("meta.mmce_width", "0.4", false, "MMCE Laplacian kernel width"),
    ("meta.multi_domain", "false", false, "corrupt meta-validation batches"),
    (
        "meta.trajectory_stride",
        "1",
        false,
        "record every n-th omega in the report",
    ),
    ("dece.bins", "15", true, "DECE bins M"),
    ("dece.tau_a", "100.0", true, "soft accuracy sharpness"),
    ("dece.tau_b", "0.01", true, "soft binning temperature"),
    ("eval.bins", "15", true, "ECE bins M"),
    (
        "eval.early_stopping",
        "false",
        false,
        "test the best-validation-accuracy epoch (reference: true)",
    ),
    (
        "eval.corrupted_domains",
        "false",
        false,
        "also evaluate held-out corrupted test domains",
    ),
    (
        "eval.snapshot_every",
        "0",
        false,
        "save a checkpoint every n epochs (0 disables)",
    ),
];

pub fn config_help() -> String {
    let width = CONFIG_KEYS.iter().map(|(k, ..)| k.len()).max().unwrap_or(0);
    let mut out =
        String::from("Config keys (JSON file via --config, or --set key=value; [ref] marks reference defaults):\n");
    for (key, default, reference, desc) in CONFIG_KEYS {
        let tag = if *reference { " [ref]" } else { "" };
        out.push_str(&format!("  {key:width$}  {default}{tag}  {desc}\n"));
    }
    out
}
