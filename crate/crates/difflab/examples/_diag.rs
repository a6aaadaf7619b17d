use difflab::losses::*;
use difflab::categorical::NoiseDistribution;
use difflab::schedule::NoiseSchedule;
use ndarray::Array1;

struct Wavy { k_data: usize, phase: f64 }
impl DiscreteDenoiser for Wavy {
    fn k_data(&self) -> usize { self.k_data }
    fn predict(&self, x_t: &[usize], t: f64) -> Vec<Array1<f64>> {
        let idx = difflab::simplex::seq_to_index(x_t, self.k_data + 2) as f64;
        (0..x_t.len()).map(|coord| {
            let mut l = Array1::zeros(self.k_data);
            for c in 0..self.k_data {
                l[c] = (self.phase + 7.3*idx + 3.1*coord as f64 + 13.7*c as f64 + 0.61*(t*32.0).floor()).sin();
            }
            let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut e = l.mapv(|v| (v - m).exp());
            let s = e.sum();
            e.mapv_inplace(|v| v / s);
            e
        }).collect()
    }
}

fn main() {
    let kernel = DiscreteKernel::new(
        NoiseSchedule::log_linear_snr_clipped(13.0, -22.0, 2e-5).unwrap(),
        NoiseDistribution::mask(4).unwrap(),
    );
    let x0 = [1usize, 2];
    let model = Wavy { k_data: 3, phase: 0.5 };
    for nodes in [513usize, 1025, 2049] {
        let dse = dse_loss(&x0, &kernel, &model, nodes).unwrap();
        let c = dse_limit_constant(&x0, &kernel, nodes).unwrap();
        println!("nodes {nodes}: dse {dse:.9} const {c:.9} limit {:.9}", dse + c);
    }
    for t in [64usize, 128, 256, 512, 1024, 2048] {
        let r = discrete_time_elbo_discrete(&x0, &kernel, &model, t).unwrap();
        println!("T {t}: L_diff {:.9}", r.diffusion_term);
    }
}
