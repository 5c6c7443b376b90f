use crate::geometry::RobotPose;
use crate::scalar::Real;

/// One RK4 step of the unicycle `x' = v cos(theta)`, `y' = v sin(theta)`,
/// `theta' = omega` with the input held over `dt`.
pub fn step_unicycle<T: Real>(pose: &RobotPose<T>, u: [T; 2], dt: T) -> RobotPose<T> {
    let [v, w] = u;
    let f = |theta: T| (v * theta.cos(), v * theta.sin());
    let two = T::two();
    let half = T::half();
    let (k1x, k1y) = f(pose.theta);
    let (k2x, k2y) = f(pose.theta + half * dt * w);
    let (k3x, k3y) = f(pose.theta + half * dt * w);
    let (k4x, k4y) = f(pose.theta + dt * w);
    let sixth = dt / T::lit(6.0);
    RobotPose::new(
        pose.x + sixth * (k1x + two * k2x + two * k3x + k4x),
        pose.y + sixth * (k1y + two * k2y + two * k3y + k4y),
        pose.theta + dt * w,
    )
}
