//! Architecture files bundled with the crate.

macro_rules! bundled {
    ($($name:literal),* $(,)?) => {
        /// `(name, base text, branch text)` for every bundled architecture.
        pub const ARCHITECTURES: &[(&str, &str, &str)] = &[
            $((
                $name,
                include_str!(concat!("../../netspecs/", $name, ".netspec")),
                include_str!(concat!("../../netspecs/", $name, "-branch.netspec")),
            )),*
        ];
    };
}

bundled!(
    "alexnet-c100",
    "alexnet-quick-c100",
    "vgg11-c100",
    "nin-c100",
    "resnet56-c100",
    "alexnet-caffe",
    "desk-synthetic",
);

/// Base and branch text of a bundled architecture.
pub fn shipped(name: &str) -> Option<(&'static str, &'static str)> {
    ARCHITECTURES
        .iter()
        .find(|(n, _, _)| *n == name)
        .map(|&(_, base, branch)| (base, branch))
}
